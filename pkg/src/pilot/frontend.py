"""Waveform chunking and STFT magnitude/phase features."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 44100
NUM_CHANNELS = 4
CHUNK_MS = 500
FFT_SIZE = 2048
FRAME_MS = 40
SHIFT_MS = 20


class WavFormatError(ValueError):
    """A WAV file does not have the expected layout (channels, rate, encoding)."""


@dataclass(frozen=True)
class Waveform:
    """Multichannel audio, ``samples`` shaped (C, T)."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be (channels, time), got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True)
class SpectralChunk:
    """STFT features of one chunk.

    ``tensor`` is (K, L, 2C): the first C slices along the last axis are
    magnitudes, the last C are phases in radians.
    """

    tensor: np.ndarray
    chunk_index: int
    chunk_start_time: float

    @property
    def num_frames(self) -> int:
        return self.tensor.shape[0]


def samples_for(ms: float, sample_rate: int) -> int:
    return int(round(ms * sample_rate / 1000.0))


def chunk(waveform: Waveform, chunk_ms: float = CHUNK_MS) -> list[Waveform]:
    """Split into contiguous non-overlapping chunks; a trailing partial chunk is dropped."""
    size = samples_for(chunk_ms, waveform.sample_rate)
    count = waveform.num_samples // size
    return [Waveform(waveform.samples[:, i * size:(i + 1) * size], waveform.sample_rate) for i in range(count)]


def frame_layout(num_samples: int, sample_rate: int, frame_ms: float = FRAME_MS, shift_ms: float = SHIFT_MS):
    """Return (frame_length, hop, num_frames): one frame per hop that starts inside the chunk."""
    frame_len = samples_for(frame_ms, sample_rate)
    hop = samples_for(shift_ms, sample_rate)
    return frame_len, hop, -(-num_samples // hop)


def frame_centers(chunk_start: float, num_frames: int, frame_ms: float = FRAME_MS, shift_ms: float = SHIFT_MS) -> np.ndarray:
    """Frame-center times in seconds, the reference instants for annotation rasterization."""
    return chunk_start + (np.arange(num_frames) * shift_ms + frame_ms / 2.0) / 1000.0


def _frames(segment: np.ndarray, frame_len: int, hop: int, num_frames: int) -> np.ndarray:
    # zero-pad past the chunk end so the last windows never read the next chunk
    C, T = segment.shape
    padded = np.zeros((C, (num_frames - 1) * hop + frame_len), dtype=np.float64)
    padded[:, :T] = segment
    idx = np.arange(num_frames)[:, None] * hop + np.arange(frame_len)[None, :]
    return padded[:, idx]  # (C, K, frame_len)


def stft(
    segment: Waveform,
    fft_size: int = FFT_SIZE,
    frame_ms: float = FRAME_MS,
    shift_ms: float = SHIFT_MS,
    chunk_index: int = 0,
    chunk_start_time: float = 0.0,
    dtype=np.float32,
) -> SpectralChunk:
    """Magnitude/phase STFT of one chunk.

    A Hamming window of ``frame_ms`` is zero-padded to ``fft_size``. The DC
    bin is dropped, leaving ``fft_size // 2`` bins.
    """
    frame_len, hop, num_frames = frame_layout(segment.num_samples, segment.sample_rate, frame_ms, shift_ms)
    if fft_size < frame_len:
        raise ValueError(f"fft_size {fft_size} is shorter than the {frame_len}-sample frame")
    window = np.hamming(frame_len)
    frames = _frames(segment.samples.astype(np.float64), frame_len, hop, num_frames) * window
    spec = np.fft.rfft(frames, n=fft_size, axis=-1)[:, :, 1:]  # (C, K, L)
    mag = np.abs(spec)
    phase = np.angle(spec)
    # np.angle returns -pi for negative reals; fold onto the half-open (-pi, pi]
    phase[phase <= -np.pi] = np.pi
    tensor = np.concatenate([mag, phase], axis=0).transpose(1, 2, 0)
    return SpectralChunk(np.ascontiguousarray(tensor, dtype=dtype), chunk_index, chunk_start_time)


def spectral_chunks(waveform: Waveform, chunk_ms: float = CHUNK_MS, dtype=np.float32) -> list[SpectralChunk]:
    size_s = samples_for(chunk_ms, waveform.sample_rate) / waveform.sample_rate
    return [stft(seg, chunk_index=i, chunk_start_time=i * size_s, dtype=dtype)
            for i, seg in enumerate(chunk(waveform, chunk_ms))]


def read_wav(path: str | Path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    """Load a 4-channel 16-bit PCM or 32-bit float WAV file."""
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if rate != expected_rate:
        raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampling)")
    if data.ndim != 2 or data.shape[1] != NUM_CHANNELS:
        channels = 1 if data.ndim == 1 else data.shape[1]
        raise WavFormatError(f"{path}: {channels} channels, expected {NUM_CHANNELS}")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise WavFormatError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(np.ascontiguousarray(samples.T), rate)


def write_wav(path: str | Path, waveform: Waveform) -> None:
    """Write 32-bit float PCM."""
    wavfile.write(str(path), waveform.sample_rate, np.ascontiguousarray(waveform.samples.T, dtype=np.float32))
