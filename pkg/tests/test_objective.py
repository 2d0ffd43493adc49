import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_module_gradients
from pilot import autodiff as ad
from pilot.encoder import EncoderConfig, TemporalEncoder
from pilot.lgs import DoaPosterior, LgsHead
from pilot.objective import LossConfig, binary_cross_entropy, doa_error, frame_loss, kl_to_unit, pit_loss
from pilot.trainer import kaiming_init

PRINTED = LossConfig()
CONVENTIONAL = LossConfig(conventional_great_circle=True)


def err(pred, target, conventional=False):
    return float(doa_error(np.array(pred, float), np.array(target, float), conventional).data)


def random_posterior(rng, shape, requires_grad=False):
    gamma = rng.uniform(0.05, 0.95, shape)
    mean = rng.uniform(-1.5, 1.5, (*shape, 2))
    a = rng.uniform(-1, 1, (*shape, 2, 2))
    cov = a @ np.swapaxes(a, -1, -2) + 0.3 * np.eye(2)
    return DoaPosterior(*(ad.Tensor(t, requires_grad=requires_grad) for t in (gamma, mean, cov)))


def random_targets(rng, shape):
    active = (rng.uniform(size=shape) < 0.6).astype(float)
    doa = np.stack([rng.uniform(-math.pi, math.pi, shape), rng.uniform(-1.2, 1.2, shape)], axis=-1)
    return active, doa


def test_doa_error_examples():
    assert err([0.3, -0.2], [0.3, -0.2]) == pytest.approx(0.0, abs=1e-3)
    assert err([math.pi / 2, 0.7], [-math.pi / 2, -0.4]) == pytest.approx(math.pi, abs=1e-3)
    assert err([0.0, 0.0], [0.0, math.pi / 2]) == pytest.approx(math.pi / 2, abs=1e-12)


def test_conventional_form_is_great_circle():
    rng = np.random.default_rng(0)
    p = np.stack([rng.uniform(-math.pi, math.pi, 50), rng.uniform(-1.5, 1.5, 50)], axis=1)
    t = np.stack([rng.uniform(-math.pi, math.pi, 50), rng.uniform(-1.5, 1.5, 50)], axis=1)

    def unit(x):
        return np.stack([np.cos(x[:, 1]) * np.cos(x[:, 0]), np.cos(x[:, 1]) * np.sin(x[:, 0]), np.sin(x[:, 1])], 1)

    expected = np.arccos(np.clip((unit(p) * unit(t)).sum(1), -1, 1))
    got = doa_error(p, t, conventional=True).data
    np.testing.assert_allclose(got, expected, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.booleans())
def test_doa_error_range_and_symmetry(v, conventional):
    a, b = v[:2], v[2:]
    e = err(a, b, conventional)
    assert 0.0 <= e <= math.pi
    assert e == err(b, a, conventional)


def test_bce_at_half():
    bce = binary_cross_entropy(ad.Tensor(np.array([0.5, 0.5])), np.array([0.0, 1.0])).data
    np.testing.assert_allclose(bce, math.log(2), rtol=1e-15)


def test_bce_clamped():
    bce = binary_cross_entropy(ad.Tensor(np.array([0.0, 1.0])), np.array([1.0, 0.0])).data
    np.testing.assert_allclose(bce, -math.log(1e-7), rtol=1e-9)


def test_inactive_target_example():
    post = DoaPosterior(ad.Tensor(np.array([0.5])), ad.Tensor(np.array([[1.0, 0.3]])), ad.Tensor(np.eye(2)[None]))
    loss = frame_loss(post, np.array([0.0]), np.array([[-2.0, 0.5]]))
    assert float(loss.data[0]) == pytest.approx(0.6931, abs=1e-4)
    assert float(loss.data[0]) == pytest.approx(math.log(2), rel=1e-14)


def test_kl_identity_is_zero():
    assert float(kl_to_unit(ad.Tensor(np.eye(2))).data) == 0.0


def test_kl_monte_carlo():
    cov = np.diag([0.5, 2.0])
    kl = float(kl_to_unit(ad.Tensor(cov)).data)
    assert kl == pytest.approx(0.25, abs=1e-14)
    rng = np.random.default_rng(0)
    x = rng.multivariate_normal(np.zeros(2), cov, size=1_000_000)
    log_p = -0.5 * (x[:, 0] ** 2 / 0.5 + x[:, 1] ** 2 / 2.0) - 0.5 * math.log(np.linalg.det(cov))
    log_q = -0.5 * (x ** 2).sum(1)
    samples = log_p - log_q
    se = samples.std(ddof=1) / math.sqrt(len(samples))
    assert abs(samples.mean() - kl) < 3 * se


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_non_negative(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (2, 2))
    cov = a @ a.T + 1e-3 * np.eye(2)
    assert float(kl_to_unit(ad.Tensor(cov)).data) >= -1e-12


def test_pit_single_source_is_plain_sum():
    rng = np.random.default_rng(1)
    post = random_posterior(rng, (5, 1))
    active, doa = random_targets(rng, (5, 1))
    plain = float(ad.sum(frame_loss(post, active, doa)).data)
    assert float(pit_loss(post, active, doa).data) == plain


def brute_force_pit(post, active, doa, config):
    best = math.inf
    for perm in itertools.permutations(range(active.shape[-1])):
        p = list(perm)
        total = 0.0
        for k in range(active.shape[0]):
            for n in range(active.shape[1]):
                cell = DoaPosterior(ad.Tensor(post.gamma.data[k, n]), ad.Tensor(post.mean.data[k, n]),
                                    ad.Tensor(post.covariance.data[k, n]))
                total += float(frame_loss(cell, np.array(active[k, p[n]]), doa[k, p[n]], config).data)
        best = min(best, total)
    return best


@pytest.mark.parametrize("config", [PRINTED, CONVENTIONAL, LossConfig(alpha=2.5, beta=0.3)])
@pytest.mark.parametrize("seed", range(4))
def test_pit_matches_brute_force(seed, config):
    rng = np.random.default_rng(seed)
    post = random_posterior(rng, (6, 3))
    active, doa = random_targets(rng, (6, 3))
    got = float(pit_loss(post, active, doa, config).data)
    assert got == pytest.approx(brute_force_pit(post, active, doa, config), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(range(3)))
def test_pit_invariant_to_target_order_and_below_identity(seed, perm):
    rng = np.random.default_rng(seed)
    post = random_posterior(rng, (4, 3))
    active, doa = random_targets(rng, (4, 3))
    base = float(pit_loss(post, active, doa).data)
    permuted = float(pit_loss(post, active[:, list(perm)], doa[:, list(perm)]).data)
    assert permuted == pytest.approx(base, rel=1e-12)
    identity = float(ad.sum(frame_loss(post, active, doa)).data)
    assert base <= identity + 1e-12


def test_pit_permutation_shared_across_frames_and_per_chunk():
    rng = np.random.default_rng(3)
    post = random_posterior(rng, (2, 4, 3))
    active, doa = random_targets(rng, (2, 4, 3))
    total, perms = pit_loss(post, active, doa, return_permutations=True)
    assert perms.shape == (2, 3)
    per_chunk = [float(pit_loss(DoaPosterior(*(ad.Tensor(t.data[b]) for t in post)), active[b], doa[b]).data)
                 for b in range(2)]
    assert float(total.data) == pytest.approx(sum(per_chunk), rel=1e-12)


def test_pit_rejects_more_than_six_slots():
    rng = np.random.default_rng(4)
    post = random_posterior(rng, (2, 7))
    active, doa = random_targets(rng, (2, 7))
    with pytest.raises(ValueError):
        pit_loss(post, active, doa)


def test_inactive_slot_gives_zero_mean_gradient():
    rng = np.random.default_rng(5)
    post = random_posterior(rng, (3, 2), requires_grad=True)
    active = np.array([[0.0, 1.0], [0.0, 1.0], [0.0, 0.0]])
    doa = rng.uniform(-1, 1, (3, 2, 2))
    ad.sum(frame_loss(post, active, doa)).backward()
    assert np.all(post.mean.grad[active == 0] == 0.0)
    assert np.any(post.mean.grad[active == 1] != 0.0)


@pytest.mark.parametrize("config", [PRINTED, CONVENTIONAL])
def test_full_loss_gradient_through_head_and_encoder(config):
    N, D = 2, 4
    enc = TemporalEncoder(EncoderConfig(model_dim=D, layers=1, heads=2, ff_dim=6), dtype=np.float64)
    head = LgsHead(N, D, dtype=np.float64)
    kaiming_init(enc, 0)
    kaiming_init(head, 1)
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.standard_normal((2, 3, N, D)))
    log_sigma = ad.Tensor(rng.uniform(-0.5, 0.5, (2, 3, N, D)), requires_grad=True)
    active, doa = random_targets(rng, (2, 3, N))
    params = {f"enc.{k}": p for k, p in enc.named_parameters()}
    params.update({f"head.{k}": p for k, p in head.named_parameters()})
    params["log_sigma"] = log_sigma

    def forward():
        return pit_loss(head(enc(x), ad.exp(log_sigma)), active, doa, config)

    worst = check_module_gradients(params, forward, h=1e-6)
    assert max(worst.values()) < 1e-4, worst


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossConfig(alpha=-1.0)
