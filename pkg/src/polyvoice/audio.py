"""Mono PCM WAV reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile


class AudioError(ValueError):
    pass


def read_wav(path: str | Path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Return float64 samples in [-1, 1] and the sample rate."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise AudioError(f"cannot read {path}: {exc}") from None
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_rate is not None and rate != expected_rate:
        raise AudioError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample type {data.dtype}")
    return samples, int(rate)


def write_wav(path: str | Path, samples: np.ndarray, rate: int) -> None:
    """Write 16-bit PCM; samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(samples, -1.0, 1.0 - 1.0 / 32768.0) * 32768.0).astype(np.int16)
    wavfile.write(str(path), rate, pcm)


def wav_sample_rate(path: str | Path) -> int:
    rate, _ = wavfile.read(str(path), mmap=True)
    return int(rate)
