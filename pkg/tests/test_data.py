import json

import numpy as np
import pytest

from pilot.data import (
    ManifestError,
    build_dataset,
    chunk_targets,
    frames_per_chunk,
    make_folds,
    read_manifest,
    write_manifest,
)
from pilot.simulator import Event, SceneSpec, generate, save_scene


def ev(onset, offset, az=0.1, el=0.2):
    return Event(onset, offset, az, el, "noise")


def test_frames_per_chunk():
    assert frames_per_chunk(44100) == 25


def test_frame_center_rule_is_half_open():
    # frame centers of the first chunk are 0.02, 0.04, ..., 0.50
    active, doa = chunk_targets([ev(0.04, 0.08)], 0.0, 25, 2)
    assert list(np.flatnonzero(active[:, 0])) == [1, 2]
    np.testing.assert_allclose(doa[1, 0], [0.1, 0.2])
    assert not active[:, 1].any()


def test_overlapping_events_get_distinct_slots():
    active, doa = chunk_targets([ev(0.0, 0.3, az=1.0), ev(0.1, 0.5, az=-1.0)], 0.0, 25, 2)
    assert active.sum(axis=1).max() == 2
    assert set(np.unique(doa[active[:, 0] > 0, 0, 0])) == {1.0}
    assert set(np.unique(doa[active[:, 1] > 0, 1, 0])) == {-1.0}


def test_slot_reused_after_event_ends():
    active, _ = chunk_targets([ev(0.0, 0.1), ev(0.2, 0.4)], 0.0, 25, 1)
    assert active[:, 0].sum() == 4 + 10  # centers 0.02..0.08, then 0.20..0.38


def test_too_many_concurrent_events_drops_extra():
    active, _ = chunk_targets([ev(0.0, 0.5), ev(0.0, 0.5), ev(0.0, 0.5)], 0.0, 25, 2)
    assert active.sum(axis=1).max() == 2


@pytest.mark.parametrize("num_scenes,num_folds", [(12, 3), (30, 3), (7, 2)])
def test_folds_partition_scenes(num_scenes, num_folds):
    names = [f"s{i:02d}" for i in range(num_scenes)]
    folds = make_folds(names, num_folds, 0.2, seed=0)
    tests = [n for f in folds for n in f["test"]]
    assert sorted(tests) == names
    for f in folds:
        parts = [set(f["train"]), set(f["validation"]), set(f["test"])]
        assert set.union(*parts) == set(names)
        assert sum(len(p) for p in parts) == num_scenes
        assert f["validation"]
    assert make_folds(names, num_folds, 0.2, seed=0) == folds


def test_fold_count_validated():
    with pytest.raises(ValueError):
        make_folds(["a", "b"], 3, 0.2, 0)


def test_manifest_round_trip(tmp_path):
    names = ["a", "b", "c"]
    folds = make_folds(names, 3, 0.2, 1)
    write_manifest(tmp_path, names, folds, {"seed": 5})
    body = read_manifest(tmp_path)
    assert body["scenes"] == names and body["folds"] == folds and body["seed"] == 5
    assert body["audio"]["channel_order"] == "ACN" and body["audio"]["normalization"] == "SN3D"


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"version": 99}))
    with pytest.raises(ManifestError):
        read_manifest(tmp_path)


def test_build_dataset(tmp_path):
    scene = generate(SceneSpec(duration=2.0, num_events=1, seed=3))
    save_scene(scene, tmp_path / "x.wav")
    ds = build_dataset(tmp_path, ["x"], 2)
    assert ds.features.shape == (4, 25, 1024, 8)
    assert ds.active.shape == (4, 25, 2) and ds.doa.shape == (4, 25, 2, 2)
    with pytest.raises(ManifestError):
        build_dataset(tmp_path, ["missing"], 2)
