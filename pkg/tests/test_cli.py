import hashlib
import json
import math

import numpy as np
import pytest

from pilot.cli import main
from pilot.config import ConfigError, RunConfig, parse_config
from pilot.csvio import (
    ERROR_HEADER,
    PREDICTION_HEADER,
    DataFormatError,
    clamp_elevation,
    read_errors,
    read_predictions,
    read_report,
    wrap_azimuth,
    write_errors,
    write_predictions,
)
from pilot.data import scene_targets
from pilot.frontend import SAMPLE_RATE, Waveform, write_wav
from pilot.simulator import read_annotations

TINY = """
[model]
num_sources = 2
feature_dim = 7
conv_filters = 4
fc_hidden = 8
layers = 1
heads = 2
ff_dim = 16
[train]
batch_size = 8
epochs = 2
warmup_steps = 10
[scene]
duration = 8.0
num_events = 3
[data]
num_scenes = 6
folds = 0
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    assert run("simulate", "--config", root / "tiny.ini", "--out", root / "data", "--seed", 3) == 0
    assert run("train", root / "data", "--config", root / "tiny.ini", "--out", root / "runs") == 0
    return root


# -- configuration

def test_config_defaults_and_overrides():
    cfg = parse_config("[train]\nepochs = 7\n[loss]\nconventional_great_circle = yes\n[data]\nfolds = 0, 2\n")
    assert cfg.train.epochs == 7
    assert cfg.loss.conventional_great_circle is True
    assert cfg.data.folds == (0, 2)
    assert cfg.model == RunConfig().model


def test_config_text_round_trip():
    cfg = parse_config(TINY).with_seed(11)
    again = parse_config(cfg.to_text())
    assert again == cfg
    assert again.train.seed == again.scene.seed == 11


@pytest.mark.parametrize("text", ["[model]\nwidth = 3\n", "[optimizer]\nlr = 1\n", "[train]\nepochs = many\n",
                                  "[train]\nbatch_size = 0\n", "epochs = 3\n"])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


# -- CSV interchange

def test_wrap_and_clamp():
    np.testing.assert_allclose(wrap_azimuth([math.pi, -math.pi, 3 * math.pi, 0.5, -3.5]),
                               [math.pi, math.pi, math.pi, 0.5, 2 * math.pi - 3.5], atol=1e-12)
    assert clamp_elevation(2.0) == math.pi / 2 and clamp_elevation(-2.0) == -math.pi / 2


def test_prediction_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    M, K, N = 3, 25, 2
    gamma = rng.random((M, K, N))
    mean = np.stack([rng.uniform(-3, 3, (M, K, N)), rng.uniform(-1.5, 1.5, (M, K, N))], -1)
    A = rng.standard_normal((M, K, N, 2, 2))
    cov = A @ np.swapaxes(A, -1, -2) + 0.1 * np.eye(2)
    path = tmp_path / "p.csv"
    write_predictions(path, gamma, mean, cov)
    assert path.read_text().splitlines()[0] == ",".join(PREDICTION_HEADER)
    grid = read_predictions(path)
    assert grid.shape == (M, K, N)
    np.testing.assert_array_equal(grid.gamma, gamma)
    np.testing.assert_array_equal(grid.doa, mean)
    np.testing.assert_array_equal(grid.cov, cov)


def test_prediction_reader_rejects_incomplete_grid(tmp_path):
    path = tmp_path / "p.csv"
    write_predictions(path, np.zeros((1, 2, 2)), np.zeros((1, 2, 2, 2)), np.tile(np.eye(2), (1, 2, 2, 1, 1)))
    lines = path.read_text().splitlines()
    (tmp_path / "short.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DataFormatError):
        read_predictions(tmp_path / "short.csv")
    (tmp_path / "dup.csv").write_text("\n".join(lines[:-1] + [lines[1]]) + "\n")
    with pytest.raises(DataFormatError):
        read_predictions(tmp_path / "dup.csv")
    (tmp_path / "hdr.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataFormatError):
        read_predictions(tmp_path / "hdr.csv")


def test_error_dump_round_trip(tmp_path):
    errors = [(0, 0.5), (26, 1.25), (26, 0.0)]
    write_errors(tmp_path / "e.csv", errors, 25)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == ",".join(ERROR_HEADER)
    assert lines[2].startswith("1,1,")
    np.testing.assert_array_equal(read_errors(tmp_path / "e.csv"), [0.5, 1.25, 0.0])


# -- simulate

def _tree_hash(path):
    h = hashlib.sha256()
    for f in sorted(path.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_simulate_partitions_scenes(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[scene]\nduration = 3.0\nnum_events = 2\nmax_event_s = 1.5\n[data]\nnum_scenes = 12\nnum_folds = 3\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "a", "--seed", 5) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    names = manifest["scenes"]
    assert len(names) == 12
    tests = [n for fold in manifest["folds"] for n in fold["test"]]
    assert sorted(tests) == sorted(names)
    for fold in manifest["folds"]:
        parts = [set(fold[k]) for k in ("train", "validation", "test")]
        assert set().union(*parts) == set(names) and sum(map(len, parts)) == 12

    assert run("simulate", "--config", cfg, "--out", tmp_path / "b", "--seed", 5) == 0
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")
    assert run("simulate", "--config", cfg, "--out", tmp_path / "c", "--seed", 6) == 0
    assert _tree_hash(tmp_path / "a") != _tree_hash(tmp_path / "c")


def test_simulated_annotations_respect_overlap_cap(workspace):
    for csv_path in sorted((workspace / "data").glob("scene*.csv")):
        events = read_annotations(csv_path)
        # the count only changes at boundaries, so checking every onset covers all instants
        for t in [e.onset for e in events]:
            assert sum(e.onset <= t < e.offset for e in events) <= 2


# -- train / predict / evaluate / stats / plot

def test_train_writes_checkpoint_and_summary(workspace):
    fold = workspace / "runs" / "fold0"
    assert (fold / "model.ckpt").is_file()
    assert (fold / "curves.csv").read_text().count("\n") == 3
    summary = (workspace / "runs" / "summary.csv").read_text().splitlines()
    assert summary[0] == "fold,best_val_loss,best_epoch" and len(summary) == 2


def test_predict_zero_signal_shape(workspace, tmp_path):
    wav = tmp_path / "zero.wav"
    write_wav(wav, Waveform(np.zeros((4, 30 * SAMPLE_RATE), dtype=np.float32), SAMPLE_RATE))
    out = tmp_path / "pred.csv"
    assert run("predict", workspace / "runs" / "fold0" / "model.ckpt", wav, out) == 0
    grid = read_predictions(out)
    assert grid.shape == (60, 25, 2)
    assert np.all((grid.gamma >= 0) & (grid.gamma <= 1))
    assert np.all(np.abs(grid.doa[..., 0]) <= math.pi)
    assert np.all(np.abs(grid.doa[..., 1]) <= math.pi / 2)
    np.testing.assert_array_equal(grid.cov[..., 0, 1], grid.cov[..., 1, 0])
    assert np.all(np.linalg.eigvalsh(grid.cov) > 0)


def test_predict_is_deterministic(workspace, tmp_path):
    ckpt = workspace / "runs" / "fold0" / "model.ckpt"
    wav = workspace / "data" / "scene001.wav"
    assert run("predict", ckpt, wav, tmp_path / "a.csv") == 0
    assert run("predict", ckpt, wav, tmp_path / "b.csv") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def _replay(truth_csv, path, num_chunks):
    events = read_annotations(truth_csv)
    active, doa = scene_targets(events, num_chunks, 25, 2)
    write_predictions(path, active, doa, np.tile(np.eye(2) * 0.01, (*active.shape, 1, 1)))


def test_evaluate_ground_truth_replay(workspace, tmp_path, capsys):
    truth = workspace / "data" / "scene000.csv"
    _replay(truth, tmp_path / "pred.csv", 16)
    assert run("evaluate", tmp_path / "pred.csv", truth, "--out", tmp_path / "ev") == 0
    report = read_report(tmp_path / "ev" / "report.csv")
    assert report["num_frames"] == 16 * 25
    assert report["frame_recall"] == 1.0
    assert report["mean_doa_error_rad"] == pytest.approx(0.0, abs=1e-6)
    errors = read_errors(tmp_path / "ev" / "frame_errors.csv")
    assert len(errors) == report["matched_pairs"] > 0
    assert "frame recall: 1.0000" in capsys.readouterr().out


def test_predict_evaluate_round_trips_frame_count(workspace, tmp_path):
    pred = tmp_path / "pred.csv"
    assert run("predict", workspace / "runs" / "fold0" / "model.ckpt", workspace / "data" / "scene002.wav", pred) == 0
    assert run("evaluate", pred, workspace / "data" / "scene002.csv", "--out", tmp_path) == 0
    assert read_report(tmp_path / "report.csv")["num_frames"] == 16 * 25


def test_evaluate_alignment_error(workspace, tmp_path):
    truth = workspace / "data" / "scene000.csv"
    _replay(truth, tmp_path / "pred.csv", 4)  # only 2 s of predictions for an 8 s scene
    events = read_annotations(truth)
    expected = 0 if max(e.onset for e in events) < 2.0 else 3
    assert run("evaluate", tmp_path / "pred.csv", truth, "--out", tmp_path) == expected


def test_stats_identical_files(tmp_path, capsys):
    errors = [(i, float(v)) for i, v in enumerate(np.random.default_rng(1).random(200))]
    write_errors(tmp_path / "e.csv", errors, 25)
    assert run("stats", tmp_path / "e.csv", tmp_path / "e.csv") == 0
    out = capsys.readouterr().out
    p = float(out.split("p = ")[1].split()[0])
    assert p == pytest.approx(0.5, abs=0.01)


def test_stats_exit_zero_when_significant(tmp_path, capsys):
    write_errors(tmp_path / "a.csv", [(i, 0.1 * i) for i in range(20)], 25)
    write_errors(tmp_path / "b.csv", [(i, 10.0 + i) for i in range(20)], 25)
    assert run("stats", tmp_path / "a.csv", tmp_path / "b.csv") == 0
    assert float(capsys.readouterr().out.split("p = ")[1].split()[0]) < 1e-6


def test_plot_writes_svg_and_sidecar(workspace, tmp_path):
    truth = workspace / "data" / "scene000.csv"
    _replay(truth, tmp_path / "pred.csv", 16)
    assert run("plot", tmp_path / "pred.csv", truth, tmp_path / "fig.svg") == 0
    svg = (tmp_path / "fig.svg").read_text()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert "<polygon" in svg and "stroke-dasharray" in svg
    rows = (tmp_path / "fig.trajectory.csv").read_text().splitlines()
    assert len(rows) == 1 + 16 * 25 * 2
    first = [float(v) for v in rows[1].split(",")]
    # +-2 sigma band around the mean with sigma = 0.1
    assert first[4] == pytest.approx(first[3] - 0.2) and first[5] == pytest.approx(first[3] + 0.2)


# -- exit codes

def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2
    (tmp_path / "bad.ini").write_text("[model]\nwidth = 3\n")
    assert run("simulate", "--config", tmp_path / "bad.ini", "--out", tmp_path) == 2
    assert run("simulate", "--config", tmp_path / "missing.ini", "--out", tmp_path) == 2
    (tmp_path / "folds.ini").write_text("[data]\nnum_scenes = 2\nnum_folds = 3\n")
    assert run("simulate", "--config", tmp_path / "folds.ini", "--out", tmp_path / "x") == 2
    assert run("stats", tmp_path / "a", tmp_path / "b", "--threads", 0) == 2


def test_data_errors_exit_3(workspace, tmp_path):
    ckpt = workspace / "runs" / "fold0" / "model.ckpt"
    mono = tmp_path / "mono.wav"
    from scipy.io import wavfile
    wavfile.write(mono, SAMPLE_RATE, np.zeros(100, dtype=np.float32))
    assert run("predict", ckpt, mono, tmp_path / "p.csv") == 3
    assert run("predict", tmp_path / "nope.ckpt", mono, tmp_path / "p.csv") == 3
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert run("predict", tmp_path / "junk.ckpt", workspace / "data" / "scene000.wav", tmp_path / "p.csv") == 3
    assert run("train", tmp_path, "--config", workspace / "tiny.ini") == 3
    (tmp_path / "empty.csv").write_text(",".join(ERROR_HEADER) + "\n")
    assert run("stats", tmp_path / "empty.csv", tmp_path / "empty.csv") == 3
    (tmp_path / "bad.csv").write_text("x\n")
    assert run("evaluate", tmp_path / "bad.csv", workspace / "data" / "scene000.csv", "--out", tmp_path) == 3


def test_numerical_abort_exits_4(workspace, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    for f in (workspace / "data").iterdir():
        (data / f.name).write_bytes(f.read_bytes())
    for wav in data.glob("*.wav"):
        samples = np.full((4, 8 * SAMPLE_RATE), np.nan, dtype=np.float32)
        write_wav(wav, Waveform(samples, SAMPLE_RATE))
    assert run("train", data, "--config", workspace / "tiny.ini", "--out", tmp_path / "runs") == 4


def test_threads_flag(workspace, tmp_path):
    write_errors(tmp_path / "e.csv", [(0, 0.1), (1, 0.2)], 25)
    assert run("stats", tmp_path / "e.csv", tmp_path / "e.csv", "--threads", 1) == 0
