"""Synthetic anechoic first-order Ambisonics scenes with static point sources."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frontend import SAMPLE_RATE, Waveform, read_wav, write_wav

RAMP_S = 0.010
KINDS = ("noise", "tone")
ANNOTATION_HEADER = ("onset_s", "offset_s", "azimuth_rad", "elevation_rad", "kind")


class SceneConstraintError(ValueError):
    """The requested events cannot be placed under the overlap cap."""


@dataclass(frozen=True)
class SceneSpec:
    duration: float = 30.0
    max_overlap: int = 2
    num_events: int = 10
    min_event_s: float = 1.0
    max_event_s: float = 4.0
    azimuth_range: tuple[float, float] = (-math.pi, math.pi)
    elevation_range: tuple[float, float] = (-math.radians(60), math.radians(60))
    snr_db: float = 30.0
    sample_rate: int = SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        if self.max_overlap < 1:
            raise ValueError("max_overlap must be >= 1")
        if self.num_events < 0 or self.duration <= 0:
            raise ValueError("num_events must be >= 0 and duration > 0")
        if not 0 < self.min_event_s <= self.max_event_s:
            raise ValueError("need 0 < min_event_s <= max_event_s")


@dataclass(frozen=True)
class Event:
    onset: float
    offset: float
    azimuth: float
    elevation: float
    kind: str

    def active_at(self, t):
        return (self.onset <= t) & (t < self.offset)


@dataclass(frozen=True)
class Scene:
    waveform: Waveform  # FOA in ACN order W, Y, Z, X with SN3D gains
    events: tuple[Event, ...]


def foa_gains(azimuth: float, elevation: float) -> np.ndarray:
    """ACN/SN3D first-order gains (W, Y, Z, X) for a plane wave from (azimuth, elevation)."""
    ce = math.cos(elevation)
    return np.array([1.0, math.sin(azimuth) * ce, math.sin(elevation), math.cos(azimuth) * ce])


def encode_foa(mono, azimuth: float, elevation: float) -> np.ndarray:
    """Pan a mono signal into 4 FOA channels, shape (4, T)."""
    return foa_gains(azimuth, elevation)[:, None] * np.asarray(mono, dtype=np.float64)[None, :]


def max_overlap_count(events, times) -> int:
    """Largest number of events simultaneously active at any of ``times``."""
    if not events:
        return 0
    active = np.zeros(len(times), dtype=int)
    for ev in events:
        active += ev.active_at(times)
    return int(active.max())


def _place_events(spec: SceneSpec, rng: np.random.Generator) -> list[tuple[float, float]]:
    # greedy random placement with boundary-checked overlap counting
    placed: list[tuple[float, float]] = []
    for _ in range(spec.num_events):
        for _attempt in range(200):
            length = rng.uniform(spec.min_event_s, min(spec.max_event_s, spec.duration))
            onset = rng.uniform(0.0, spec.duration - length)
            # quantize to samples so rendered and annotated boundaries coincide
            onset = round(onset * spec.sample_rate) / spec.sample_rate
            offset = round((onset + length) * spec.sample_rate) / spec.sample_rate
            overlapping = [(a, b) for a, b in placed if a < offset and onset < b]
            points = [onset] + [a for a, _ in overlapping if a > onset]
            if all(1 + sum(a <= t < b for a, b in overlapping) <= spec.max_overlap for t in points):
                placed.append((onset, offset))
                break
        else:
            raise SceneConstraintError(
                f"could not place {spec.num_events} events of {spec.min_event_s}-{spec.max_event_s} s "
                f"in {spec.duration} s with at most {spec.max_overlap} overlapping")
    return sorted(placed)


def _ramp(n: int, sample_rate: int) -> np.ndarray:
    env = np.ones(n)
    r = min(int(round(RAMP_S * sample_rate)), n // 2)
    if r:
        edge = 0.5 - 0.5 * np.cos(np.pi * (np.arange(r) + 0.5) / r)
        env[:r] = edge
        env[n - r:] = edge[::-1]
    return env


def _source_signal(kind: str, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    # Both kinds reach well into the upper half of the spectrum; narrow-band sources leave
    # most STFT bins noise-dominated and the direction cue becomes very hard to learn.
    hi = 0.45 * sample_rate * rng.uniform(0.5, 1.0)
    if kind == "noise":
        lo = rng.uniform(50.0, 300.0)
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spec[(freqs < lo) | (freqs > hi)] = 0.0
        sig = np.fft.irfft(spec, n)
    else:
        # low fundamental so every 8-bin pooling window holds a partial
        f0 = rng.uniform(80.0, 200.0)
        t = np.arange(n) / sample_rate
        sig = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / math.sqrt(h)
                  for h in range(1, int(hi // f0) + 1))
    rms = math.sqrt(float(np.mean(sig ** 2))) or 1.0
    return sig / rms


def generate(spec: SceneSpec) -> Scene:
    """Render a scene; identical specs give bitwise-identical output."""
    rng = np.random.default_rng(spec.seed)
    sr = spec.sample_rate
    total = int(round(spec.duration * sr))
    intervals = _place_events(spec, rng)
    audio = np.zeros((4, total))
    events = []
    for onset, offset in intervals:
        kind = KINDS[int(rng.integers(len(KINDS)))]
        az = float(rng.uniform(*spec.azimuth_range))
        el = float(rng.uniform(*spec.elevation_range))
        start, stop = int(round(onset * sr)), int(round(offset * sr))
        gain = 0.1 * 10 ** (rng.uniform(-6.0, 0.0) / 20.0)
        mono = gain * _source_signal(kind, stop - start, sr, rng) * _ramp(stop - start, sr)
        audio[:, start:stop] += encode_foa(mono, az, el)
        events.append(Event(onset, offset, az, el, kind))
    # isotropic diffuse field in SN3D: each first-order channel carries a third of W's power
    noise_rms = 0.1 * 10 ** (-spec.snr_db / 20.0)
    channel_scale = noise_rms * np.array([1.0, 1 / math.sqrt(3), 1 / math.sqrt(3), 1 / math.sqrt(3)])
    audio += channel_scale[:, None] * rng.standard_normal((4, total))
    return Scene(Waveform(audio.astype(np.float32), sr), tuple(events))


def write_annotations(path: str | Path, events) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        for ev in events:
            writer.writerow([repr(ev.onset), repr(ev.offset), repr(ev.azimuth), repr(ev.elevation), ev.kind])


def read_annotations(path: str | Path) -> list[Event]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ANNOTATION_HEADER:
            raise ValueError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}")
        events = [Event(float(r[0]), float(r[1]), float(r[2]), float(r[3]), r[4]) for r in reader if r]
    return sorted(events, key=lambda e: e.onset)


def save_scene(scene: Scene, wav_path: str | Path, csv_path: str | Path | None = None) -> None:
    wav_path = Path(wav_path)
    write_wav(wav_path, scene.waveform)
    write_annotations(csv_path or wav_path.with_suffix(".csv"), scene.events)


def load_scene(wav_path: str | Path, csv_path: str | Path | None = None) -> Scene:
    wav_path = Path(wav_path)
    return Scene(read_wav(wav_path), tuple(read_annotations(csv_path or wav_path.with_suffix(".csv"))))
