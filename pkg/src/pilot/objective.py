"""Probabilistic localization loss with permutation-invariant slot assignment.

Per frame and source slot the loss is

    BCE(gamma_hat, gamma) + alpha * gamma * doa_error + beta * KL(cov || I)

where the KL term compares the posterior with a same-mean Gaussian of unit
covariance, ``0.5 * (tr cov - 2 - ln det cov)`` in two dimensions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .lgs import DoaPosterior

BCE_CLAMP = 1e-7
MAX_PIT_SOURCES = 6


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    conventional_great_circle: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def _angles(x):
    if isinstance(x, ad.Tensor):
        return x[..., 0], x[..., 1]
    x = np.asarray(x)
    return ad.Tensor(x[..., 0]), ad.Tensor(x[..., 1])


def doa_error(pred, target, conventional: bool = False) -> ad.Tensor:
    """Angle between predicted and true (azimuth, elevation) pairs, in [0, pi].

    The default evaluates ``acos(sin a1 sin a2 + cos a1 cos a2 cos(e2 - e1))``
    with ``a`` the azimuths and ``e`` the elevations. ``conventional=True``
    swaps the roles of the two angles, giving the usual spherical law of
    cosines with elevation as latitude.
    """
    az_p, el_p = _angles(pred)
    az_t, el_t = _angles(target)
    if conventional:
        az_p, el_p, az_t, el_t = el_p, az_p, el_t, az_t
    arg = ad.sin(az_p) * ad.sin(az_t) + ad.cos(az_p) * ad.cos(az_t) * ad.cos(el_t - el_p)
    return ad.acos(arg)


def kl_to_unit(covariance: ad.Tensor) -> ad.Tensor:
    """KL(N(m, cov) || N(m, I)) for 2x2 covariances."""
    return 0.5 * (ad.trace(covariance) - 2.0 - ad.log(ad.det2x2(covariance)))


def binary_cross_entropy(prob: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    p = ad.clip(prob, BCE_CLAMP, 1.0 - BCE_CLAMP)
    target = np.asarray(target, dtype=prob.dtype)
    return -(ad.log(p) * target + ad.log(1.0 - p) * (1.0 - target))


def frame_loss(posterior: DoaPosterior, target_active, target_doa, config: LossConfig = LossConfig()) -> ad.Tensor:
    """Elementwise loss for every (..., slot) cell under a fixed slot assignment.

    Args:
        posterior: predicted activity (..., N), means (..., N, 2), covariances (..., N, 2, 2).
        target_active: 0/1 activity, shape (..., N).
        target_doa: true angles (..., N, 2); ignored where inactive.
    """
    gamma = np.asarray(target_active, dtype=posterior.gamma.dtype)
    if gamma.shape != posterior.gamma.shape:
        raise ad.ShapeError(f"frame_loss: target shape {gamma.shape} != prediction shape {posterior.gamma.shape}")
    doa = np.where(gamma[..., None] > 0, np.asarray(target_doa, dtype=gamma.dtype), 0.0)
    loss = binary_cross_entropy(posterior.gamma, gamma)
    if config.alpha:
        loss = loss + doa_error(posterior.mean, doa, config.conventional_great_circle) * (config.alpha * gamma)
    if config.beta:
        loss = loss + kl_to_unit(posterior.covariance) * config.beta
    return loss


def _permute_targets(active: np.ndarray, doa: np.ndarray, perms: np.ndarray):
    # perms[b, n] is the target slot matched to prediction slot n in chunk b
    idx = perms[:, None, :]
    active_p = np.take_along_axis(active, np.broadcast_to(idx, active.shape), axis=2)
    doa_p = np.take_along_axis(doa, np.broadcast_to(idx[..., None], doa.shape), axis=2)
    return active_p, doa_p


def best_permutations(posterior: DoaPosterior, target_active, target_doa, config: LossConfig = LossConfig()) -> np.ndarray:
    """For each chunk, the slot permutation minimizing the summed loss.

    Inputs are batched (B, K, N, ...). One permutation is shared by all K
    frames of a chunk. Ties resolve to the lexicographically first permutation.
    """
    active = np.asarray(target_active)
    B, K, N = active.shape
    if N > MAX_PIT_SOURCES:
        raise ValueError(f"permutation search supports at most {MAX_PIT_SOURCES} slots, got {N}")
    data_post = DoaPosterior(*(ad.Tensor(t.data) for t in posterior))
    no_kl = LossConfig(config.alpha, 0.0, config.conventional_great_circle)
    with ad.no_grad():
        # cost[b, n, m]: prediction slot n scored against target slot m
        cost = np.empty((B, N, N))
        for m in range(N):
            fixed = np.full((B, N), m)
            act_m, doa_m = _permute_targets(active, np.asarray(target_doa), fixed)
            cost[:, :, m] = frame_loss(data_post, act_m, doa_m, no_kl).data.sum(axis=1)
    perms = np.array(list(itertools.permutations(range(N))))
    totals = cost[:, np.arange(N)[None, :], perms].sum(axis=-1)  # (B, N!)
    return perms[np.argmin(totals, axis=1)]


def pit_loss(posterior: DoaPosterior, target_active, target_doa, config: LossConfig = LossConfig(),
             return_permutations: bool = False):
    """Permutation-invariant loss summed over frames and slots of each chunk, then over chunks.

    Unbatched (K, N, ...) inputs are treated as a single chunk. The gradient
    flows only through the minimizing permutation.
    """
    active = np.asarray(target_active)
    doa = np.asarray(target_doa)
    if active.ndim == 2:
        posterior = DoaPosterior(*(ad.reshape(t, (1, *t.shape)) for t in posterior))
        active, doa = active[None], doa[None]
    perms = best_permutations(posterior, active, doa, config)
    active_p, doa_p = _permute_targets(active, doa, perms)
    total = ad.sum(frame_loss(posterior, active_p, doa_p, config))
    return (total, perms) if return_permutations else total
