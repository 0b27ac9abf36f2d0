"""Speaker-identity augmentation: F0, formant and duration scaling.

Each transform ``t`` in ``1..tau`` yields one copy of every utterance whose
speaker is relabeled ``s + t * n_speakers`` while the accent is kept, which
multiplies the speaker count by ``tau + 1`` without adding accents.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import get_window

from .audio import AudioError, read_wav, write_wav
from .config import FeatureConfig
from .dataset import DatasetManifest, UtteranceRecord, write_manifest
from .features import extract_f0

log = logging.getLogger(__name__)

KINDS = ("formant_down", "formant_up", "f0_down", "f0_up", "faster", "slower")


class AugmentError(ValueError):
    pass


class UnvoicedInputWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    factor_range: tuple[float, float]
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AugmentError(f"unknown augmentation kind {self.kind!r}")
        lo, hi = self.factor_range
        if not 0.5 <= lo <= hi <= 2.0:
            raise AugmentError(f"factor range {self.factor_range} outside [0.5, 2.0]")


def default_specs(seed: int = 0) -> list[AugmentSpec]:
    """The six standard transforms and their default factor ranges."""
    ranges = {
        "formant_down": (0.875, 1.0),
        "formant_up": (1.0, 1.25),
        "f0_down": (0.9, 1.0),
        "f0_up": (1.0, 1.1),
        "faster": (0.9, 1.0),
        "slower": (1.0, 1.1),
    }
    return [AugmentSpec(kind, ranges[kind], seed) for kind in KINDS]


@dataclass(frozen=True)
class AugmentedUtterance:
    waveform: np.ndarray
    new_speaker_id: int
    accent_id: int
    transform_id: int
    factor: float


def relabel_speaker(speaker_id: int, t: int, n_speakers: int, n_transforms: int = len(KINDS)) -> int:
    if not 1 <= t <= n_transforms:
        raise AugmentError(f"transform id {t} outside 1..{n_transforms} (0 is the original stratum)")
    if not 0 <= speaker_id < n_speakers:
        raise AugmentError(f"speaker id {speaker_id} outside [0, {n_speakers})")
    return speaker_id + t * n_speakers


def _check_factor(factor: float) -> None:
    if not 0.5 <= factor <= 2.0:
        raise AugmentError(f"factor {factor} outside [0.5, 2.0]")


def _analysis_config(sample_rate: int) -> FeatureConfig:
    return FeatureConfig(sample_rate=sample_rate, win=1024 if sample_rate <= 24000 else 2048, hop=64, n_mels=8, fmax=sample_rate / 2)


def _f0_per_sample(x: np.ndarray, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    cfg = _analysis_config(sample_rate)
    if len(x) < cfg.win:
        return np.zeros(len(x)), np.zeros(len(x), dtype=bool)
    track = extract_f0(x, cfg)
    centers = np.arange(len(track)) * cfg.hop + cfg.win / 2
    idx = np.clip(np.searchsorted(centers, np.arange(len(x))), 0, len(track) - 1)
    voiced = track.voiced_mask[idx]
    f0 = np.where(voiced, track.f0_hz[idx], 0.0)
    return f0, voiced


def _pitch_marks(x: np.ndarray, f0: np.ndarray, voiced: np.ndarray, sample_rate: int):
    n = len(x)
    unvoiced_step = max(1, int(round(0.005 * sample_rate)))
    marks, periods = [], []
    t = 0
    prev_voiced = False
    while t < n:
        if voiced[t]:
            period = sample_rate / f0[t]
            if prev_voiced:
                radius = max(1, int(0.15 * period))
                lo, hi = max(0, t - radius), min(n, t + radius + 1)
            else:
                lo, hi = t, min(n, t + int(np.ceil(period)))
            m = lo + int(np.argmax(x[lo:hi]))
            if marks and m <= marks[-1]:
                m = marks[-1] + 1
            if m >= n:
                break
            marks.append(m)
            periods.append(period)
            t = int(round(m + period))
            prev_voiced = True
        else:
            marks.append(t)
            periods.append(0.0)
            t += unvoiced_step
            prev_voiced = False
    # period 0 marks an unvoiced anchor
    return np.asarray(marks), np.asarray(periods)


def scale_f0(waveform: np.ndarray, factor: float, sample_rate: int = 16000) -> np.ndarray:
    """TD-PSOLA pitch shift by ``factor`` with the length preserved.

    Two-period Hann grains are cut at pitch marks and re-spaced at the mark
    spacing divided by ``factor``. Unvoiced stretches are copied through.
    """
    _check_factor(factor)
    x = np.asarray(waveform, dtype=np.float64)
    f0, voiced = _f0_per_sample(x, sample_rate)
    if not voiced.any():
        warnings.warn("input has no voiced frames; returned unchanged", UnvoicedInputWarning, stacklevel=2)
        return x.copy()
    marks, mark_period = _pitch_marks(x, f0, voiced, sample_rate)
    mark_voiced = mark_period > 0
    n = len(x)
    spacing = np.diff(np.append(marks, n)).astype(np.float64)
    period = np.where(mark_voiced, mark_period, spacing)
    out = np.zeros(n)
    weight = np.zeros(n)
    s = float(marks[0])
    while s < n:
        j = int(np.argmin(np.abs(marks - s)))
        m = marks[j]
        # grain spans one local period on each side of the mark
        half = max(1, min(int(round(period[j])), sample_rate // 25))
        window = get_window("hann", 2 * half + 1, fftbins=False)
        center = int(round(s))
        src = np.arange(m - half, m + half + 1)
        dst = np.arange(center - half, center + half + 1)
        ok = (src >= 0) & (src < n) & (dst >= 0) & (dst < n)
        out[dst[ok]] += x[src[ok]] * window[ok]
        weight[dst[ok]] += window[ok]
        s += spacing[j] / factor if mark_voiced[j] else spacing[j]
    covered = weight > 1e-3
    out[covered] /= weight[covered]
    out[~covered] = x[~covered]
    return out


def scale_duration(waveform: np.ndarray, rate: float, sample_rate: int = 16000) -> np.ndarray:
    """WSOLA time stretch; the output is ``round(rate * len)`` samples long."""
    _check_factor(rate)
    x = np.asarray(waveform, dtype=np.float64)
    n = len(x)
    n_out = int(round(rate * n))
    frame = 2 * int(round(0.016 * sample_rate))
    hop_out = frame // 2
    tol = int(round(0.01 * sample_rate))
    hop_in = hop_out / rate
    window = get_window("hann", frame)
    offset = frame // 2 + tol
    xp = np.concatenate([np.zeros(offset), x, np.zeros(offset + frame + int(np.ceil(hop_in)) + tol)])
    n_frames = n_out // hop_out + 2
    out = np.zeros(n_frames * hop_out + frame)
    weight = np.zeros_like(out)
    prev = None
    for k in range(n_frames):
        nominal = int(round(offset + k * hop_in - frame // 2))
        if prev is None:
            pos = nominal
        else:
            template = xp[prev + hop_out : prev + hop_out + frame]
            lo = max(0, nominal - tol)
            hi = min(len(xp) - frame, nominal + tol)
            region = xp[lo : hi + frame]
            corr = np.correlate(region, template, mode="valid")
            energy = np.convolve(region**2, np.ones(frame), mode="valid")
            score = corr / np.sqrt(np.maximum(energy, 1e-12))
            pos = lo + int(np.argmax(score)) if np.any(energy > 1e-12) else nominal
        out[k * hop_out : k * hop_out + frame] += xp[pos : pos + frame] * window
        weight[k * hop_out : k * hop_out + frame] += window
        prev = pos
    out = out / np.maximum(weight, 1e-3)
    return out[frame // 2 : frame // 2 + n_out]


def _stft(x: np.ndarray, n_fft: int, hop: int):
    pad = n_fft // 2
    xp = np.pad(x, (pad, pad + n_fft))
    window = get_window("hann", n_fft)
    count = 1 + (len(x) + pad) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(count)[:, None]
    return np.fft.rfft(xp[idx] * window, axis=1), window, idx, len(xp), pad


def _lifter(log_mag: np.ndarray, n_cep: int, n_fft: int) -> np.ndarray:
    cep = np.fft.irfft(log_mag, n_fft, axis=-1)
    cep[..., n_cep : n_fft - n_cep + 1] = 0.0
    return np.fft.rfft(cep, axis=-1).real


def harmonic_envelope(log_mag: np.ndarray, f0_hz: float, sample_rate: int, n_fft: int) -> np.ndarray:
    """Log envelope through the harmonic peaks of one frame, cepstrally smoothed.

    Peaks are searched within a third of ``f0`` around each harmonic and joined
    by linear interpolation, so the envelope between harmonics never rings.
    """
    bin_hz = sample_rate / n_fft
    bins = np.arange(len(log_mag), dtype=np.float64)
    peak_bins, peak_vals = [], []
    for h in range(1, int((sample_rate / 2) / f0_hz) + 1):
        lo = int(np.floor((h - 1 / 3) * f0_hz / bin_hz))
        hi = int(np.ceil((h + 1 / 3) * f0_hz / bin_hz)) + 1
        lo, hi = max(lo, 0), min(hi, len(log_mag))
        if hi - lo < 1:
            break
        k = lo + int(np.argmax(log_mag[lo:hi]))
        peak_bins.append(k)
        peak_vals.append(log_mag[k])
    if len(peak_bins) < 2:
        return _lifter(log_mag, 30, n_fft)
    envelope = np.interp(bins, peak_bins, peak_vals)
    # smooth away interpolation corners; the pitch quefrency is already gone
    return _lifter(envelope, max(8, int(0.8 * sample_rate / f0_hz)), n_fft)


def scale_formants(waveform: np.ndarray, factor: float, sample_rate: int = 16000, n_fft: int = 1024, hop: int = 128) -> np.ndarray:
    """Warp the spectral envelope along frequency by ``factor``, keeping F0.

    Each frame is split into a smooth log envelope and an excitation residual:
    voiced frames take the envelope through their harmonic peaks, unvoiced
    frames a low-quefrency cepstral lifter. The envelope is resampled at
    ``k / factor`` and recombined with the untouched excitation and phase.
    """
    _check_factor(factor)
    x = np.asarray(waveform, dtype=np.float64)
    if len(x) == 0:
        return x.copy()
    f0, voiced = _f0_per_sample(x, sample_rate)
    spec, window, idx, padded_len, pad = _stft(x, n_fft, hop)
    log_mag = np.log(np.abs(spec) + 1e-10)
    bins = np.arange(spec.shape[1], dtype=np.float64)
    gain = np.zeros_like(log_mag)
    for f in range(len(spec)):
        centre = min(f * hop, len(x) - 1)
        if voiced[centre]:
            env = harmonic_envelope(log_mag[f], f0[centre], sample_rate, n_fft)
        else:
            env = _lifter(log_mag[f], 30, n_fft)
        gain[f] = np.interp(bins / factor, bins, env) - env
    frames = np.fft.irfft(spec * np.exp(gain), n_fft, axis=1) * window
    out = np.zeros(padded_len)
    norm = np.zeros(padded_len)
    np.add.at(out, idx, frames)
    np.add.at(norm, idx, np.broadcast_to(window**2, frames.shape))
    out = out / np.maximum(norm, 1e-8)
    return out[pad : pad + len(x)]


def apply_transform(waveform: np.ndarray, kind: str, factor: float, sample_rate: int) -> np.ndarray:
    if kind.startswith("formant"):
        return scale_formants(waveform, factor, sample_rate)
    if kind.startswith("f0"):
        return scale_f0(waveform, factor, sample_rate)
    return scale_duration(waveform, factor, sample_rate)


@dataclass
class AugmentResult:
    manifest: DatasetManifest
    factors: dict[tuple[int, int], float]
    failures: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[tuple[str, str]] = field(default_factory=list)


def sample_factors(spec: AugmentSpec, t: int, n_records: int) -> np.ndarray:
    """Per-utterance factors, uniform on the factor range; independent of processing order."""
    rng = np.random.default_rng([spec.seed, t])
    lo, hi = spec.factor_range
    return rng.uniform(lo, hi, size=n_records)


def augment_dataset(
    manifest: DatasetManifest,
    specs: Sequence[AugmentSpec] | None,
    out_dir: str | Path,
    workers: int = 1,
) -> AugmentResult:
    """Write transformed audio plus a merged manifest (``out_dir/manifest.txt``).

    Originals come first, then each transform stratum in order, so re-parsing
    the written manifest reproduces the relabeled speaker ids.
    """
    specs = list(specs) if specs is not None else default_specs()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_spk = manifest.n_speakers
    tau = len(specs)
    jobs = []
    factors: dict[tuple[int, int], float] = {}
    for t, spec in enumerate(specs, start=1):
        stratum = out / f"t{t}_{spec.kind}"
        stratum.mkdir(exist_ok=True)
        for i, (record, factor) in enumerate(zip(manifest.records, sample_factors(spec, t, len(manifest.records)))):
            factors[(i, t)] = float(factor)
            target = stratum / f"{i:05d}_{Path(record.audio_path).stem}.wav"
            jobs.append((t, spec, i, record, float(factor), target))

    def work(job):
        t, spec, i, record, factor, target = job
        try:
            samples, _ = read_wav(record.audio_path, expected_rate=manifest.sample_rate_hz)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                result = apply_transform(samples, spec.kind, factor, manifest.sample_rate_hz)
            write_wav(target, result, manifest.sample_rate_hz)
            notes = [str(w.message) for w in caught]
        except (AudioError, AugmentError, ValueError, OSError) as exc:
            return job, None, str(exc)
        new_id = relabel_speaker(record.speaker_id, t, n_spk, tau)
        rec = UtteranceRecord(str(target.resolve()), record.ipa_text, new_id, record.accent_id, record.language_id)
        return job, rec, notes

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    records = list(manifest.records)
    failures, notes = [], []
    for job, rec, info in results:
        if rec is None:
            failures.append((job[3].audio_path, info))
            log.warning("augmentation %s failed for %s: %s", job[1].kind, job[3].audio_path, info)
            continue
        records.append(rec)
        notes += [(rec.audio_path, msg) for msg in info]
    speakers = list(manifest.speakers) + [f"{name}~t{t}" for t in range(1, tau + 1) for name in manifest.speakers]
    comments = list(manifest.comments)
    comments.append("augmented: " + ", ".join(f"t{t}={s.kind}[{s.factor_range[0]},{s.factor_range[1]}]" for t, s in enumerate(specs, 1)))
    comments.append("augment seeds: " + ",".join(str(s.seed) for s in specs))
    merged = DatasetManifest(records, speakers, list(manifest.accents), list(manifest.languages), manifest.sample_rate_hz, comments)
    write_manifest(merged, out / "manifest.txt")
    return AugmentResult(merged, factors, failures, notes)
