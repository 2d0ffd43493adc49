"""Command-line entry point: simulate, train, predict, evaluate, stats, plot.

Exit codes: 0 success, 2 usage or configuration error, 3 data-format error,
4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .csvio import (
    AlignmentError,
    DataFormatError,
    read_errors,
    read_predictions,
    write_errors,
    write_predictions,
    write_report,
)
from .data import ManifestError, build_dataset, frames_per_chunk, make_folds, read_manifest, scene_targets, write_manifest
from .experiment import scene_names, simulate_scenes
from .frontend import CHUNK_MS, SAMPLE_RATE, WavFormatError, read_wav, spectral_chunks
from .metrics import DegenerateSampleError, evaluate, mann_whitney_u_one_sided
from .model import ModelConfig, PilotModel, predict_chunks
from .plot import plot_trajectories
from .simulator import SceneConstraintError, max_overlap_count, read_annotations, save_scene
from .trainer import NumericalAbort, fit, kaiming_init, load_checkpoint, restore, save_checkpoint, write_curves

log = logging.getLogger("pilot")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.conventional_great_circle:
        cfg = cfg.with_conventional_great_circle()
    log.info("resolved configuration:\n%s", cfg.to_text().rstrip())
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    try:
        folds = make_folds(scene_names(cfg.data.num_scenes), cfg.data.num_folds, cfg.data.validation_fraction,
                           cfg.scene.seed)
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from exc
    out = _out_dir(args, "data")
    scenes = simulate_scenes(cfg.scene, cfg.data.num_scenes, cfg.scene.seed)
    for name, scene in scenes.items():
        save_scene(scene, out / f"{name}.wav")
        if log.isEnabledFor(logging.DEBUG):
            times = np.arange(0.0, cfg.scene.duration, 1.0 / cfg.scene.sample_rate)
            log.debug("%s: %d events, peak overlap %d", name, len(scene.events), max_overlap_count(scene.events, times))
    write_manifest(out, scene_names(cfg.data.num_scenes), folds, {"seed": cfg.scene.seed})
    (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    print(f"wrote {len(scenes)} scenes and {len(folds)} folds to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    data_dir = Path(args.data)
    manifest = read_manifest(data_dir)
    out = _out_dir(args, "runs")
    (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    wanted = set(cfg.data.folds) if cfg.data.folds else None
    N = cfg.model.num_sources
    summary = []
    for fold in manifest["folds"]:
        if wanted is not None and fold["fold"] not in wanted:
            continue
        fold_dir = out / f"fold{fold['fold']}"
        fold_dir.mkdir(exist_ok=True)
        train = build_dataset(data_dir, fold["train"], N)
        val = build_dataset(data_dir, fold["validation"], N)
        model = PilotModel(cfg.model)
        kaiming_init(model, cfg.train.seed)
        log.info("fold %d: %d train / %d validation chunks, %d parameters", fold["fold"], len(train), len(val),
                 model.num_parameters())
        try:
            result = fit(model, train, val, cfg.train, cfg.loss, curves_path=fold_dir / "curves.csv")
        except NumericalAbort as exc:
            if exc.checkpoint is not None:
                save_checkpoint(exc.checkpoint, fold_dir / "last_good.ckpt")
            raise
        save_checkpoint(result.best, fold_dir / "model.ckpt")
        write_curves(fold_dir / "curves.csv", result.curves)
        summary.append((fold["fold"], result.best.best_val_loss, result.best.epoch))
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "best_val_loss", "best_epoch"])
        for row in summary:
            w.writerow([row[0], repr(row[1]), row[2]])
    for fold, loss, epoch in summary:
        print(f"fold {fold}: best validation loss {loss:.4f} at epoch {epoch}")
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        raise DataFormatError(str(exc)) from exc
    model = PilotModel(ModelConfig(**ckpt.model_config))
    restore(model, ckpt)
    waveform = read_wav(args.wav)
    chunks = spectral_chunks(waveform, dtype=model.dtype)
    K = frames_per_chunk(waveform.sample_rate)
    features = np.stack([c.tensor for c in chunks]) if chunks else np.zeros((0, K, 1024, 8), dtype=model.dtype)
    gamma, mean, cov = predict_chunks(model, features)
    write_predictions(args.csv_out, gamma, mean, cov)
    print(f"wrote {len(features)} chunks x {K} frames x {model.config.num_sources} slots to {args.csv_out}")
    return EXIT_OK


def _aligned_truth(grid, truth_csv):
    try:
        events = read_annotations(truth_csv)
    except (ValueError, IndexError) as exc:
        raise DataFormatError(f"{truth_csv}: {exc}") from exc
    M, K, N = grid.shape
    expected_k = frames_per_chunk(SAMPLE_RATE)
    if K != expected_k:
        raise AlignmentError(f"predictions have {K} frames per chunk, the analysis grid has {expected_k}")
    end = M * CHUNK_MS / 1000.0
    late = [e for e in events if e.onset >= end]
    if late:
        raise AlignmentError(f"{truth_csv}: event at {late[0].onset:.3f} s lies beyond the predicted {end:.1f} s")
    slots = max(N, max_overlap_count(events, np.arange(0.0, end, 0.001)) if events else 0)
    active, doa = scene_targets(events, M, K, slots)
    return events, active.reshape(M * K, slots), doa.reshape(M * K, slots, 2)


def _pad_slots(gamma, doa, cov, slots):
    N = gamma.shape[1]
    if N == slots:
        return gamma, doa, cov
    F = len(gamma)
    pad = slots - N
    return (np.concatenate([gamma, np.zeros((F, pad))], 1), np.concatenate([doa, np.zeros((F, pad, 2))], 1),
            np.concatenate([cov, np.tile(np.eye(2), (F, pad, 1, 1))], 1))


def cmd_evaluate(args) -> int:
    grid = read_predictions(args.pred_csv)
    _, true_active, true_doa = _aligned_truth(grid, args.truth_csv)
    gamma, doa, cov = _pad_slots(*grid.flat(), true_active.shape[1])
    report = evaluate(gamma, doa, true_active, true_doa, cov, conventional=args.conventional_great_circle)
    out = _out_dir(args, ".")
    write_report(out / "report.csv", report)
    write_errors(out / "frame_errors.csv", report.frame_errors, grid.shape[1])
    print(report.summary())
    return EXIT_OK


def cmd_stats(args) -> int:
    a = read_errors(args.errors_a)
    b = read_errors(args.errors_b)
    if len(a) == 0 or len(b) == 0:
        raise DataFormatError("both error files must contain at least one row")
    u, p = mann_whitney_u_one_sided(a, b)
    print(f"U = {u:.1f}")
    print(f"p = {p:.6g} (one-sided: first sample smaller)")
    return EXIT_OK


def cmd_plot(args) -> int:
    grid = read_predictions(args.pred_csv)
    events, _, _ = _aligned_truth(grid, args.truth_csv)
    svg, side = plot_trajectories(grid, events, args.svg_out)
    print(f"wrote {svg} and {side}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key/value run configuration (INI sections)")
    common.add_argument("--seed", type=int, help="overrides train.seed and scene.seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("--conventional-great-circle", action="store_true",
                        help="use the standard great-circle DoA error in loss and metrics")

    parser = argparse.ArgumentParser(prog="pilot", description="probabilistic sound event localization")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="render synthetic FOA scenes and a fold manifest")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("train", parents=[common], help="train one model per fold")
    p.add_argument("data", help="dataset directory with manifest.json")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("predict", parents=[common], help="per-frame posteriors for a WAV file")
    p.add_argument("checkpoint")
    p.add_argument("wav")
    p.add_argument("csv_out")
    p.set_defaults(func=cmd_predict)
    p = sub.add_parser("evaluate", parents=[common], help="frame recall and DoA error against annotations")
    p.add_argument("pred_csv")
    p.add_argument("truth_csv")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("stats", parents=[common], help="one-sided Mann-Whitney U test on two error dumps")
    p.add_argument("errors_a")
    p.add_argument("errors_b")
    p.set_defaults(func=cmd_stats)
    p = sub.add_parser("plot", parents=[common], help="SVG trajectories with uncertainty bands")
    p.add_argument("pred_csv")
    p.add_argument("truth_csv")
    p.add_argument("svg_out")
    p.set_defaults(func=cmd_plot)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("PILOT_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("pilot: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(args.threads)
    else:
        limits = nullcontext()
    try:
        with limits:
            return args.func(args)
    except ConfigError as exc:
        print(f"pilot: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, WavFormatError, ManifestError, DegenerateSampleError, SceneConstraintError) as exc:
        print(f"pilot: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"pilot: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"pilot: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
