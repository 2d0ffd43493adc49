import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import sph_harm_y

from pilot.data import frames_per_chunk, scene_targets
from pilot.metrics import evaluate
from pilot.simulator import (
    ANNOTATION_HEADER,
    SceneConstraintError,
    SceneSpec,
    encode_foa,
    foa_gains,
    generate,
    load_scene,
    max_overlap_count,
    read_annotations,
    save_scene,
)


def sn3d_real_sh(azimuth, elevation):
    """Real first-order harmonics in ACN order from scipy's complex orthonormal ones, rescaled to SN3D."""
    colat = math.pi / 2 - elevation
    out = []
    for l in (0, 1):
        norm = math.sqrt(4 * math.pi / (2 * l + 1))
        for m in range(-l, l + 1):
            y = complex(sph_harm_y(l, abs(m), colat, azimuth))
            if m < 0:
                val = math.sqrt(2) * (-1) ** m * y.imag
            elif m == 0:
                val = y.real
            else:
                val = math.sqrt(2) * (-1) ** m * y.real
            out.append(norm * val)
    return np.array(out)


def test_front_gains():
    np.testing.assert_allclose(foa_gains(0.0, 0.0), [1, 0, 0, 1], atol=1e-15)


@pytest.mark.parametrize("az", [-2.0, 0.0, 1.3, math.pi])
def test_zenith_gains(az):
    np.testing.assert_allclose(foa_gains(az, math.pi / 2), [1, 0, 1, 0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-math.pi / 2, math.pi / 2))
def test_gains_match_spherical_harmonics(az, el):
    np.testing.assert_allclose(foa_gains(az, el), sn3d_real_sh(az, el), atol=1e-12)


def test_encode_foa_scales_mono():
    mono = np.array([1.0, -2.0, 0.5])
    out = encode_foa(mono, 0.7, -0.3)
    np.testing.assert_allclose(out, foa_gains(0.7, -0.3)[:, None] * mono)


def test_deterministic():
    spec = SceneSpec(duration=6.0, num_events=3, seed=42)
    a, b = generate(spec), generate(spec)
    assert a.waveform.samples.tobytes() == b.waveform.samples.tobytes()
    assert a.events == b.events
    c = generate(SceneSpec(duration=6.0, num_events=3, seed=43))
    assert c.waveform.samples.tobytes() != a.waveform.samples.tobytes()


@pytest.mark.parametrize("max_overlap,num_events", [(1, 5), (2, 10), (3, 14)])
def test_overlap_cap_at_every_sample(max_overlap, num_events):
    spec = SceneSpec(duration=20.0, max_overlap=max_overlap, num_events=num_events, seed=max_overlap)
    scene = generate(spec)
    times = np.arange(int(spec.duration * spec.sample_rate)) / spec.sample_rate
    assert max_overlap_count(scene.events, times) <= max_overlap
    for ev in scene.events:
        assert spec.azimuth_range[0] <= ev.azimuth <= spec.azimuth_range[1]
        assert spec.elevation_range[0] <= ev.elevation <= spec.elevation_range[1]
        assert ev.kind in ("noise", "tone")
    onsets = [e.onset for e in scene.events]
    assert onsets == sorted(onsets)


def test_no_events_is_noise_floor():
    scene = generate(SceneSpec(duration=2.0, num_events=0, seed=1))
    assert scene.events == ()
    assert scene.waveform.samples.shape == (4, 88200)
    rms = np.sqrt((scene.waveform.samples.astype(np.float64) ** 2).mean(axis=1))
    np.testing.assert_allclose(rms[0], 0.1 * 10 ** (-30 / 20), rtol=0.02)


def test_single_event_spanning_file():
    spec = SceneSpec(duration=3.0, num_events=1, min_event_s=3.0, max_event_s=3.0, seed=2)
    scene = generate(spec)
    (ev,) = scene.events
    assert ev.onset == 0.0 and ev.offset == 3.0
    times = np.arange(0, 3.0, 0.01)
    assert np.all(ev.active_at(times))
    assert max_overlap_count(scene.events, times) == 1


def test_rendered_energy_follows_annotations():
    spec = SceneSpec(duration=10.0, num_events=2, max_overlap=1, snr_db=60.0, seed=5)
    scene = generate(spec)
    sr = spec.sample_rate
    w = scene.waveform.samples[0].astype(np.float64)
    active = np.zeros(len(w), dtype=bool)
    for ev in scene.events:
        active[int(round(ev.onset * sr)):int(round(ev.offset * sr))] = True
    assert np.sqrt((w[~active] ** 2).mean()) < 1e-3
    for ev in scene.events:
        mid = slice(int(round(ev.onset * sr)) + 1000, int(round(ev.offset * sr)) - 1000)
        seg = scene.waveform.samples[:, mid].astype(np.float64)
        # the direction encoded in the first-order channels recovers the annotation
        y, z, x = (seg[1:] * seg[0]).mean(axis=1)
        assert math.atan2(y, x) == pytest.approx(ev.azimuth, abs=1e-2)
        assert math.atan2(z, math.hypot(x, y)) == pytest.approx(ev.elevation, abs=1e-2)


def test_infeasible_spec_rejected():
    with pytest.raises(SceneConstraintError):
        generate(SceneSpec(duration=5.0, max_overlap=1, num_events=8, min_event_s=2.0, max_event_s=3.0))


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        SceneSpec(max_overlap=0)
    with pytest.raises(ValueError):
        SceneSpec(min_event_s=3.0, max_event_s=2.0)


def test_save_load_round_trip(tmp_path):
    scene = generate(SceneSpec(duration=3.0, num_events=2, seed=7))
    save_scene(scene, tmp_path / "s.wav")
    raw = (tmp_path / "s.csv").read_bytes()
    assert raw.startswith(",".join(ANNOTATION_HEADER).encode() + b"\n")
    assert b"\r" not in raw
    back = load_scene(tmp_path / "s.wav")
    np.testing.assert_array_equal(back.waveform.samples, scene.waveform.samples)
    assert back.events == scene.events
    assert read_annotations(tmp_path / "s.csv") == list(scene.events)


def test_ground_truth_replay_is_perfect():
    spec = SceneSpec(duration=30.0, max_overlap=2, num_events=10, seed=11)
    scene = generate(spec)
    K = frames_per_chunk(spec.sample_rate)
    active, doa = scene_targets(scene.events, 60, K, 2)
    report = evaluate(active.reshape(-1, 2), doa.reshape(-1, 2, 2), active.reshape(-1, 2), doa.reshape(-1, 2, 2),
                      conventional=True)
    assert report.num_frames == 1500
    assert report.frame_recall == 1.0
    assert report.mean_doa_error < 1e-3
