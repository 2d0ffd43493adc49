"""Frame-level targets, chunked datasets and the fold manifest."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frontend import CHUNK_MS, Waveform, frame_centers, frame_layout, samples_for, spectral_chunks
from .simulator import load_scene

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """The dataset manifest is missing, malformed, or points at missing files."""


def frames_per_chunk(sample_rate: int, chunk_ms: float = CHUNK_MS) -> int:
    return frame_layout(samples_for(chunk_ms, sample_rate), sample_rate)[2]


def chunk_targets(events, chunk_start: float, num_frames: int, num_slots: int):
    """Activity (K, N) and angles (K, N, 2) for one chunk.

    An event is active in a frame when its [onset, offset) interval covers the
    frame center. Events are given slots in onset order, a slot being reused
    once its previous occupant has no more active frames in the chunk, so one
    event keeps one slot for the whole chunk.
    """
    centers = frame_centers(chunk_start, num_frames)
    active = np.zeros((num_frames, num_slots))
    doa = np.zeros((num_frames, num_slots, 2))
    slot_free_from = np.zeros(num_slots, dtype=int)
    for ev in sorted(events, key=lambda e: (e.onset, e.offset)):
        frames = np.flatnonzero(ev.active_at(centers))
        if len(frames) == 0:
            continue
        free = np.flatnonzero(slot_free_from <= frames[0])
        if len(free) == 0:
            log.warning("more than %d concurrent events at %.3f s; dropping one", num_slots, chunk_start)
            continue
        slot = free[0]
        slot_free_from[slot] = frames[-1] + 1
        active[frames, slot] = 1.0
        doa[frames, slot] = (ev.azimuth, ev.elevation)
    return active, doa


def scene_targets(events, num_chunks: int, num_frames: int, num_slots: int, chunk_s: float = CHUNK_MS / 1000.0):
    """Stacked per-chunk targets: (num_chunks, K, N) and (num_chunks, K, N, 2)."""
    pairs = [chunk_targets(events, c * chunk_s, num_frames, num_slots) for c in range(num_chunks)]
    if not pairs:
        return np.zeros((0, num_frames, num_slots)), np.zeros((0, num_frames, num_slots, 2))
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


@dataclass
class ChunkDataset:
    """Features and targets of many chunks, aligned on the first axis."""

    features: np.ndarray  # (M, K, L, 2C)
    active: np.ndarray  # (M, K, N)
    doa: np.ndarray  # (M, K, N, 2)
    scene_ids: np.ndarray  # (M,) index into ``names``
    names: list[str]

    def __len__(self) -> int:
        return len(self.features)

    def batch(self, index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.features[index], self.active[index], self.doa[index]


def featurize(waveform: Waveform, events, num_slots: int, dtype=np.float32):
    chunks = spectral_chunks(waveform, dtype=dtype)
    K = frames_per_chunk(waveform.sample_rate)
    features = np.stack([c.tensor for c in chunks]) if chunks else np.zeros((0, K, 1024, 8), dtype=dtype)
    active, doa = scene_targets(events, len(chunks), K, num_slots)
    return features, active, doa


def build_dataset(data_dir: str | Path, names: list[str], num_slots: int, dtype=np.float32) -> ChunkDataset:
    """Load and featurize the named scenes (``<name>.wav`` + ``<name>.csv``)."""
    data_dir = Path(data_dir)
    feats, acts, doas, ids = [], [], [], []
    for i, name in enumerate(names):
        wav = data_dir / f"{name}.wav"
        if not wav.exists():
            raise ManifestError(f"scene file missing: {wav}")
        scene = load_scene(wav)
        f, a, d = featurize(scene.waveform, scene.events, num_slots, dtype)
        feats.append(f)
        acts.append(a)
        doas.append(d)
        ids.append(np.full(len(f), i))
    return ChunkDataset(np.concatenate(feats), np.concatenate(acts), np.concatenate(doas),
                        np.concatenate(ids), list(names))


def make_folds(names: list[str], num_folds: int, validation_fraction: float, seed: int) -> list[dict]:
    """Partition scenes into test folds; the rest of each fold splits into train/validation."""
    if num_folds < 2 or num_folds > len(names):
        raise ValueError(f"need 2 <= num_folds <= {len(names)} scenes, got {num_folds}")
    order = [names[i] for i in np.random.default_rng(seed).permutation(len(names))]
    groups = [sorted(order[i::num_folds]) for i in range(num_folds)]
    folds = []
    for i, test in enumerate(groups):
        rest = [n for n in order if n not in set(test)]
        n_val = max(1, int(math.ceil(validation_fraction * len(rest))))
        folds.append({"fold": i, "train": sorted(rest[n_val:]), "validation": sorted(rest[:n_val]), "test": test})
    return folds


def write_manifest(data_dir: str | Path, names: list[str], folds: list[dict], extra: dict | None = None) -> Path:
    path = Path(data_dir) / MANIFEST_NAME
    body = {
        "version": MANIFEST_VERSION,
        "audio": {"format": "FOA", "channel_order": "ACN", "normalization": "SN3D", "sample_format": "float32"},
        "scenes": list(names),
        "folds": folds,
    }
    if extra:
        body.update(extra)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"no {MANIFEST_NAME} in {data_dir}")
    try:
        body = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    if body.get("version") != MANIFEST_VERSION or "folds" not in body:
        raise ManifestError(f"{path}: unsupported manifest layout")
    return body
