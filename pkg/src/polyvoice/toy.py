"""Synthetic source-filter vowels and a small multi-speaker, multi-accent corpus.

The corpus mirrors the entangled low-resource setting: every speaker talks in
exactly one accent/language, so speaker and accent are perfectly correlated.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import write_wav

VOWEL_FORMANTS = {
    "a": (750.0, 1250.0, 2600.0),
    "e": (480.0, 1900.0, 2600.0),
    "i": (300.0, 2300.0, 3000.0),
    "o": (480.0, 900.0, 2500.0),
    "u": (330.0, 800.0, 2400.0),
    "ə": (520.0, 1500.0, 2500.0),
}
BANDWIDTHS = (90.0, 110.0, 160.0)


def harmonic_source(f0: np.ndarray, sample_rate: int) -> np.ndarray:
    """Band-limited glottal-like source with a -6 dB/octave tilt.

    ``f0`` gives the instantaneous frequency per sample.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(sample_rate / 2 / max(float(f0.max()), 1.0))
    out = np.zeros_like(phase)
    for k in range(1, n_harm + 1):
        # drop harmonics that would alias where f0 rises
        out += np.where(k * f0 < sample_rate / 2, np.sin(k * phase) / k, 0.0)
    return out


def resonator(x: np.ndarray, freq: float, bandwidth: float, sample_rate: int) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2.0 * np.pi * freq / sample_rate
    a = [1.0, -2.0 * r * np.cos(theta), r * r]
    gain = 1.0 - 2.0 * r * np.cos(theta) + r * r
    return lfilter([gain], a, x)


def synthetic_vowel(
    f0: float | np.ndarray = 220.0,
    duration: float = 1.0,
    formants=VOWEL_FORMANTS["a"],
    sample_rate: int = 16000,
    bandwidths=BANDWIDTHS,
    amplitude: float = 0.5,
) -> np.ndarray:
    n = int(round(duration * sample_rate))
    contour = np.broadcast_to(np.asarray(f0, dtype=np.float64), (n,)) if np.ndim(f0) == 0 else np.asarray(f0)[:n]
    x = harmonic_source(contour, sample_rate)
    for freq, bw in zip(formants, bandwidths):
        x = resonator(x, freq, bw, sample_rate)
    peak = np.max(np.abs(x))
    return amplitude * x / peak if peak > 0 else x


@dataclass(frozen=True)
class ToySpeaker:
    label: str
    f0_hz: float
    formant_scale: float
    accent: int


@dataclass(frozen=True)
class ToyAccent:
    label: str
    language: str
    vowels: tuple[str, ...]
    f2_shift: float
    tempo: float


TOY_ACCENTS = (
    ToyAccent("acc_north", "lang_a", ("a", "e", "i", "ə"), 1.0, 1.0),
    ToyAccent("acc_south", "lang_b", ("a", "o", "u", "ə"), 1.12, 1.35),
)
TOY_SPEAKERS = (
    ToySpeaker("spk0", 110.0, 1.0, 0),
    ToySpeaker("spk1", 200.0, 1.12, 0),
    ToySpeaker("spk2", 140.0, 0.95, 1),
    ToySpeaker("spk3", 235.0, 1.18, 1),
)


def toy_utterance(speaker: ToySpeaker, accent: ToyAccent, rng: np.random.Generator, sample_rate: int = 16000):
    """Return (waveform, ipa_text) for a random vowel sequence."""
    n_vowels = int(rng.integers(3, 6))
    vowels = [str(v) for v in rng.choice(accent.vowels, size=n_vowels)]
    long_mark = rng.random(n_vowels) < 0.25
    pieces, text = [], []
    for v, is_long in zip(vowels, long_mark):
        dur = accent.tempo * float(rng.uniform(0.09, 0.14)) * (1.8 if is_long else 1.0)
        n = int(dur * sample_rate)
        drift = 1.0 + 0.04 * np.sin(np.linspace(0, np.pi, n) + rng.uniform(0, np.pi))
        f1, f2, f3 = VOWEL_FORMANTS[v]
        formants = (f1 * speaker.formant_scale, f2 * speaker.formant_scale * accent.f2_shift, f3 * speaker.formant_scale)
        seg = synthetic_vowel(speaker.f0_hz * drift, dur, formants, sample_rate, amplitude=float(rng.uniform(0.3, 0.6)))
        ramp = min(n // 4, int(0.01 * sample_rate))
        env = np.ones(n)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[n - ramp :] = np.linspace(1, 0, ramp)
        pieces.append(seg * env)
        text.append(v + ("ː" if is_long else ""))
    lead = np.zeros(int(0.03 * sample_rate))
    return np.concatenate([lead, *pieces, lead]), "".join(text)


def write_toy_corpus(out_dir: str | Path, n_utterances: int = 32, seed: int = 0, sample_rate: int = 16000) -> Path:
    """Write WAVs plus ``manifest.txt`` (round-robin over speakers); returns the manifest path."""
    out = Path(out_dir)
    wav_dir = out / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = [f"# sample_rate={sample_rate}", f"# toy corpus seed={seed}"]
    for i in range(n_utterances):
        speaker = TOY_SPEAKERS[i % len(TOY_SPEAKERS)]
        accent = TOY_ACCENTS[speaker.accent]
        wave, text = toy_utterance(speaker, accent, rng, sample_rate)
        name = f"{speaker.label}_{i:03d}.wav"
        write_wav(wav_dir / name, wave, sample_rate)
        lines.append(f"wavs/{name}|{text}|{speaker.label}|{accent.label}|{accent.language}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
