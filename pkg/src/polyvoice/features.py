"""Acoustic features: log-mel spectrogram, YIN F0 with voicing, frame energy,
and per-speaker F0 statistics for standardization.

Mel frames and pitch frames share the same framing: frame ``f`` covers
samples ``[f*hop, f*hop + win)``, no padding, so ``F = 1 + (len - win) // hop``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .config import FeatureConfig


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (n_mels, F) log-mel magnitudes
    hop_length: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PitchTrack:
    f0_hz: np.ndarray
    voiced_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.f0_hz)


@dataclass(frozen=True)
class EnergyTrack:
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class SpeakerPitchStats:
    speaker_id: int
    mean_hz: float
    std_hz: float
    n_voiced_frames: int


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, win // 2 + 1)."""
    return _filterbank(config.sample_rate, config.win, config.n_mels, config.fmin, config.fmax)


def mel_center_frequencies(config: FeatureConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    return edges[1:-1]


def n_frames(n_samples: int, config: FeatureConfig) -> int:
    if n_samples < config.win:
        raise FeatureError(f"waveform of {n_samples} samples is shorter than one window ({config.win})")
    return 1 + (n_samples - config.win) // config.hop


def _frames(waveform: np.ndarray, config: FeatureConfig) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise FeatureError("expected a mono waveform")
    count = n_frames(len(x), config)
    return sliding_window_view(x, config.win)[:: config.hop][:count]


def mel_spectrogram(waveform: np.ndarray, config: FeatureConfig) -> MelSpectrogram:
    frames = _frames(waveform, config)
    window = get_window("hann", config.win)
    magnitude = np.abs(np.fft.rfft(frames * window, axis=1))
    mel = mel_filterbank(config) @ magnitude.T
    values = np.log(np.maximum(mel, config.log_floor))
    return MelSpectrogram(values, config.hop, config.sample_rate)


def frame_energy(mel: MelSpectrogram, domain: str = "log") -> EnergyTrack:
    """Per-frame mean over mel channels, on log-mel values or linear magnitudes."""
    if domain == "log":
        return EnergyTrack(mel.values.mean(axis=0))
    if domain == "linear":
        return EnergyTrack(np.exp(mel.values).mean(axis=0))
    raise FeatureError(f"unknown energy domain {domain!r}")


def _yin_cmnd(frames: np.ndarray, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative-mean-normalized difference function for lags 0..max_lag+1."""
    n_frames_, win = frames.shape
    width = win - max_lag - 1
    n_fft = 1 << int(np.ceil(np.log2(win + width)))
    head = np.fft.rfft(frames[:, :width], n_fft, axis=1)
    full = np.fft.rfft(frames, n_fft, axis=1)
    corr = np.fft.irfft(np.conj(head) * full, n_fft, axis=1)[:, : max_lag + 2]
    sq = np.concatenate([np.zeros((n_frames_, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(max_lag + 2)
    energy0 = sq[:, width][:, None]
    energy_lag = sq[:, lags + width] - sq[:, lags]
    diff = np.maximum(energy0 + energy_lag - 2.0 * corr, 0.0)
    running = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(running > 0, diff[:, 1:] * lags[1:] / running, 1.0)
    return cmnd, energy0[:, 0] / width


def extract_f0(waveform: np.ndarray, config: FeatureConfig) -> PitchTrack:
    """YIN pitch tracking on the mel framing; unvoiced frames carry 0 Hz."""
    frames = _frames(waveform, config)
    sr = config.sample_rate
    min_lag = max(2, int(np.floor(sr / config.f0_max)))
    max_lag = int(np.ceil(sr / config.f0_min))
    cmnd, power = _yin_cmnd(frames, max_lag)
    f0 = np.zeros(len(frames))
    voiced = np.zeros(len(frames), dtype=bool)
    for f in range(len(frames)):
        if power[f] < 1e-10:
            continue
        row = cmnd[f]
        below = np.nonzero(row[min_lag : max_lag + 1] < config.voicing_threshold)[0]
        if below.size == 0:
            continue
        tau = min_lag + below[0]
        while tau + 1 <= max_lag and row[tau + 1] < row[tau]:
            tau += 1
        a, b, c = row[tau - 1], row[tau], row[tau + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if denom > 0 else 0.0
        hz = sr / (tau + float(np.clip(shift, -0.5, 0.5)))
        if config.f0_min <= hz <= config.f0_max:
            f0[f] = hz
            voiced[f] = True
    return PitchTrack(f0, voiced)


def extract_all(waveform: np.ndarray, config: FeatureConfig) -> tuple[MelSpectrogram, PitchTrack, EnergyTrack]:
    mel = mel_spectrogram(waveform, config)
    pitch = extract_f0(waveform, config)
    energy = frame_energy(mel, config.energy_domain)
    return mel, pitch, energy


def speaker_f0_stats(tracks: Iterable[tuple[int, PitchTrack]], std_floor: float = 1.0) -> dict[int, SpeakerPitchStats]:
    """Population mean/std of each speaker's voiced frames, std floored at ``std_floor``.

    Accumulates sums so per-utterance shards can be merged in any order.
    """
    acc: dict[int, list[float]] = {}
    for speaker_id, track in tracks:
        vals = np.asarray(track.f0_hz, dtype=np.float64)[np.asarray(track.voiced_mask, dtype=bool)]
        s = acc.setdefault(int(speaker_id), [0, 0.0, 0.0])
        s[0] += vals.size
        s[1] += float(vals.sum())
        s[2] += float((vals**2).sum())
    stats = {}
    for speaker_id in sorted(acc):
        n, total, total_sq = acc[speaker_id]
        if n == 0:
            raise FeatureError(f"speaker {speaker_id} has no voiced frames")
        mean = total / n
        var = max(total_sq / n - mean * mean, 0.0)
        stats[speaker_id] = SpeakerPitchStats(speaker_id, mean, max(np.sqrt(var), std_floor), int(n))
    return stats


def standardize_f0(track: PitchTrack, stats: SpeakerPitchStats, std_floor: float = 1e-8) -> np.ndarray:
    """(f0 - mean) / std on voiced frames, 0 on unvoiced frames."""
    if not stats.std_hz > std_floor:
        raise FeatureError(f"std {stats.std_hz} for speaker {stats.speaker_id} is below the floor {std_floor}")
    voiced = np.asarray(track.voiced_mask, dtype=bool)
    return np.where(voiced, (np.asarray(track.f0_hz, dtype=np.float64) - stats.mean_hz) / stats.std_hz, 0.0)


def destandardize_f0(values: np.ndarray, voiced_mask: np.ndarray, stats: SpeakerPitchStats) -> PitchTrack:
    """Inverse of ``standardize_f0`` with any speaker's statistics."""
    voiced = np.asarray(voiced_mask, dtype=bool)
    f0 = np.where(voiced, np.asarray(values, dtype=np.float64) * stats.std_hz + stats.mean_hz, 0.0)
    return PitchTrack(f0, voiced)
