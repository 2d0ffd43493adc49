"""CSV interchange: per-frame predictions, per-pair DoA errors and evaluation summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PREDICTION_HEADER = ("chunk_index", "frame_index", "slot", "gamma", "azimuth_rad", "elevation_rad",
                     "cov_aa", "cov_ae", "cov_ee")
ERROR_HEADER = ("chunk_index", "frame_index", "doa_error_rad")


class DataFormatError(ValueError):
    """An input file does not follow the expected layout."""


class AlignmentError(DataFormatError):
    """Predictions and ground truth do not share a frame grid."""


def wrap_azimuth(az):
    """Map angles onto (-pi, pi]; values already in range pass through unchanged."""
    az = np.asarray(az, dtype=np.float64)
    return np.where((az > -np.pi) & (az <= np.pi), az, np.pi - np.mod(np.pi - az, 2 * np.pi))


def clamp_elevation(el):
    return np.clip(np.asarray(el, dtype=np.float64), -np.pi / 2, np.pi / 2)


@dataclass
class PredictionGrid:
    """Predictions on a complete (chunk, frame, slot) grid."""

    gamma: np.ndarray  # (M, K, N)
    doa: np.ndarray  # (M, K, N, 2)
    cov: np.ndarray  # (M, K, N, 2, 2)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.gamma.shape

    def flat(self):
        M, K, N = self.shape
        return (self.gamma.reshape(M * K, N), self.doa.reshape(M * K, N, 2), self.cov.reshape(M * K, N, 2, 2))


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_predictions(path: str | Path, gamma, mean, cov) -> None:
    """One row per (chunk, frame, slot); azimuth wrapped and elevation clamped on the way out."""
    gamma = np.asarray(gamma, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    az = wrap_azimuth(mean[..., 0])
    el = clamp_elevation(mean[..., 1])
    off = 0.5 * (cov[..., 0, 1] + cov[..., 1, 0])
    M, K, N = gamma.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(PREDICTION_HEADER)
        for m in range(M):
            for k in range(K):
                for n in range(N):
                    w.writerow([m, k, n, repr(float(gamma[m, k, n])), repr(float(az[m, k, n])),
                                repr(float(el[m, k, n])), repr(float(cov[m, k, n, 0, 0])), repr(float(off[m, k, n])),
                                repr(float(cov[m, k, n, 1, 1]))])


def _rows(path: str | Path, header: tuple[str, ...]):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or tuple(first) != header:
            raise DataFormatError(f"{path}: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def read_predictions(path: str | Path) -> PredictionGrid:
    records = []
    for lineno, row in _rows(path, PREDICTION_HEADER):
        try:
            m, k, n = int(row[0]), int(row[1]), int(row[2])
            vals = [float(v) for v in row[3:]]
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-numeric field") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataFormatError(f"{path}:{lineno}: non-finite value")
        records.append((m, k, n, vals))
    if not records:
        raise DataFormatError(f"{path}: no prediction rows")
    M = max(r[0] for r in records) + 1
    K = max(r[1] for r in records) + 1
    N = max(r[2] for r in records) + 1
    if min(min(r[:3]) for r in records) < 0 or len(records) != M * K * N:
        raise AlignmentError(f"{path}: rows do not form a complete chunk x frame x slot grid")
    gamma = np.full((M, K, N), np.nan)
    doa = np.zeros((M, K, N, 2))
    cov = np.zeros((M, K, N, 2, 2))
    for m, k, n, (g, az, el, caa, cae, cee) in records:
        if not np.isnan(gamma[m, k, n]):
            raise AlignmentError(f"{path}: duplicate row for chunk {m}, frame {k}, slot {n}")
        gamma[m, k, n] = g
        doa[m, k, n] = (az, el)
        cov[m, k, n] = ((caa, cae), (cae, cee))
    return PredictionGrid(gamma, doa, cov)


def write_errors(path: str | Path, frame_errors, frames_per_chunk: int) -> None:
    """Dump matched-pair DoA errors; ``frame_errors`` holds (flat frame id, error) tuples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(ERROR_HEADER)
        for frame, err in frame_errors:
            w.writerow([frame // frames_per_chunk, frame % frames_per_chunk, repr(float(err))])


def read_errors(path: str | Path) -> np.ndarray:
    out = []
    for lineno, row in _rows(path, ERROR_HEADER):
        try:
            out.append(float(row[2]))
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-numeric error value") from None
    return np.array(out)


def write_report(path: str | Path, report) -> None:
    """Scalar metrics as ``metric,value`` rows plus the (predicted, true) count table."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["num_frames", report.num_frames])
        w.writerow(["frame_recall", repr(report.frame_recall)])
        w.writerow(["mean_doa_error_rad", repr(report.mean_doa_error)])
        w.writerow(["mean_doa_error_deg", repr(report.mean_doa_error_deg)])
        w.writerow(["matched_pairs", len(report.frame_errors)])
        w.writerow(["uncertainty_spearman", repr(report.uncertainty_spearman)])
        w.writerow(["error_top_spread_decile_rad", repr(report.error_top_decile)])
        w.writerow(["error_bottom_spread_decile_rad", repr(report.error_bottom_decile)])
        for (p, t), count in sorted(report.count_pairs.items()):
            w.writerow([f"frames_pred{p}_true{t}", count])


def read_report(path: str | Path) -> dict[str, float]:
    out = {}
    for lineno, row in _rows(path, ("metric", "value")):
        try:
            out[row[0]] = float(row[1])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-numeric value") from None
    return out
