"""Transfer-task metrics: speaker cosine similarity and character error rate.

Embedding and transcript providers are pluggable. Built-in toy providers keep
the pipeline hermetic; command providers wrap an external program that takes
one audio path argument and prints its answer on stdout (UTF-8).
"""

from __future__ import annotations

import json
import math
import statistics
import subprocess
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .audio import read_wav
from .config import FeatureConfig
from .features import mel_spectrogram

Z_95 = 1.96


class EvaluationError(ValueError):
    pass


class ProviderError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    provider_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise EvaluationError("embedding must be a non-empty vector")
        object.__setattr__(self, "values", v)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.provider_id != b.provider_id:
        raise EvaluationError(f"embeddings from different providers: {a.provider_id} vs {b.provider_id}")
    if a.values.shape != b.values.shape:
        raise EvaluationError(f"dimension mismatch {a.values.shape} vs {b.values.shape}")
    na, nb = np.linalg.norm(a.values), np.linalg.norm(b.values)
    if na == 0 or nb == 0:
        raise EvaluationError("cosine similarity of a zero vector")
    return float(np.clip(a.values @ b.values / (na * nb), -1.0, 1.0))


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Unit-cost Levenshtein distance, two-row DP."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def character_error_rate(reference: str, hypothesis: str) -> float:
    ref = unicodedata.normalize("NFC", reference)
    hyp = unicodedata.normalize("NFC", hypothesis)
    if not ref:
        raise EvaluationError("empty reference transcript")
    return edit_distance(ref, hyp) / len(ref)


# ---------------------------------------------------------------- items & providers


@dataclass(frozen=True)
class SynthItem:
    path: str  # synthesized output (.json mel written by the synthesizer) or audio file
    source_speaker: str
    target_accent: str
    reference_text: str


def parse_synth_manifest(path: str | Path) -> list[SynthItem]:
    """Lines ``path|source_speaker|target_accent|reference_text``; ``#`` comments."""
    path = Path(path)
    base = path.parent
    items = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("|")
        if len(parts) != 4:
            raise EvaluationError(f"{path}:{lineno}: expected 4 '|' fields, got {len(parts)}")
        p = Path(parts[0])
        items.append(SynthItem(str(p if p.is_absolute() else base / p), parts[1], parts[2], parts[3]))
    return items


def load_mel(path: str | Path, features: FeatureConfig) -> np.ndarray:
    """Log-mel of a synthesized JSON output or of a WAV file."""
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text(encoding="utf-8"))
        return np.asarray(data["mel"], dtype=np.float64)
    samples, _ = read_wav(path, expected_rate=features.sample_rate)
    return mel_spectrogram(samples, features).values


class EmbeddingProvider(Protocol):
    provider_id: str

    def embed(self, path: str) -> EmbeddingVector: ...


class TranscriptProvider(Protocol):
    def transcribe(self, path: str) -> str: ...


@dataclass
class MelStatsEmbedding:
    """Time-averaged log-mel with its channel mean removed (spectral shape only)."""

    features: FeatureConfig = field(default_factory=FeatureConfig)
    provider_id: str = "toy-melstats"

    def embed(self, path: str) -> EmbeddingVector:
        try:
            profile = load_mel(path, self.features).mean(axis=1)
        except Exception as exc:
            raise ProviderError(f"{path}: {exc}") from exc
        return EmbeddingVector(profile - profile.mean(), self.provider_id)


@dataclass
class StoredTranscript:
    """Reads the text recorded inside a synthesized JSON output."""

    def transcribe(self, path: str) -> str:
        try:
            return json.loads(Path(path).read_text(encoding="utf-8"))["text"]
        except Exception as exc:
            raise ProviderError(f"{path}: no stored transcript ({exc})") from exc


def _run(argv: Sequence[str], path: str, timeout: float) -> str:
    try:
        done = subprocess.run([*argv, path], capture_output=True, timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise ProviderError(f"{argv[0]}: {exc}") from exc
    if done.returncode != 0:
        raise ProviderError(f"{argv[0]} exited {done.returncode}: {done.stderr.decode('utf-8', 'replace').strip()}")
    return done.stdout.decode("utf-8")


@dataclass
class CommandEmbedding:
    """External embedder: prints whitespace- or comma-separated floats."""

    argv: Sequence[str]
    provider_id: str = "command"
    timeout: float = 120.0

    def embed(self, path: str) -> EmbeddingVector:
        text = _run(self.argv, path, self.timeout).replace(",", " ")
        try:
            values = np.array([float(tok) for tok in text.split()])
        except ValueError as exc:
            raise ProviderError(f"unparseable embedding output: {exc}") from exc
        if values.size == 0:
            raise ProviderError("empty embedding output")
        return EmbeddingVector(values, self.provider_id)


@dataclass
class CommandTranscript:
    argv: Sequence[str]
    timeout: float = 120.0

    def transcribe(self, path: str) -> str:
        return _run(self.argv, path, self.timeout).strip()


def providers_from_config(spec: dict, features: FeatureConfig) -> tuple[EmbeddingProvider, TranscriptProvider]:
    """``{"embedding": {"type": "toy"|"command", "argv": [...]}, "transcript": {...}}``."""
    spec = spec or {}
    unknown = set(spec) - {"embedding", "transcript"}
    if unknown:
        raise EvaluationError(f"unknown provider keys: {sorted(unknown)}")

    def pick(section: str, toy, command):
        conf = spec.get(section) or {"type": "toy"}
        kind = conf.get("type", "toy")
        if kind == "toy":
            return toy()
        if kind == "command":
            argv = conf.get("argv")
            if not argv:
                raise EvaluationError(f"{section}: command provider needs 'argv'")
            return command(conf)
        raise EvaluationError(f"{section}: unknown provider type '{kind}'")

    embedding = pick(
        "embedding",
        lambda: MelStatsEmbedding(features),
        lambda c: CommandEmbedding(list(c["argv"]), c.get("provider_id", "command"), float(c.get("timeout", 120))),
    )
    transcript = pick("transcript", StoredTranscript, lambda c: CommandTranscript(list(c["argv"]), float(c.get("timeout", 120))))
    return embedding, transcript


def reference_embeddings(paths_by_speaker: dict[str, Sequence[str]], provider: EmbeddingProvider) -> dict[str, EmbeddingVector]:
    """Average embedding over every real utterance of each speaker."""
    out = {}
    for speaker, paths in paths_by_speaker.items():
        vecs = [provider.embed(p).values for p in paths]
        if vecs:
            out[speaker] = EmbeddingVector(np.mean(vecs, axis=0), provider.provider_id)
    return out


# ---------------------------------------------------------------- report


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    halfwidth: float | None  # None when n < 2

    @classmethod
    def of(cls, values: Sequence[float]) -> "Summary":
        # statistics works in exact rationals, so the result is order-free
        vals = [float(v) for v in values]
        n = len(vals)
        if n == 0:
            return cls(0, float("nan"), None)
        mean = statistics.mean(vals)
        if n < 2:
            return cls(n, mean, None)
        return cls(n, mean, Z_95 * statistics.stdev(vals) / math.sqrt(n))

    def fmt(self, scale: float = 1.0, digits: int = 3) -> str:
        if self.n == 0:
            return "-"
        hw = "n/a" if self.halfwidth is None else f"{self.halfwidth * scale:.{digits}f}"
        return f"{self.mean * scale:.{digits}f} ± {hw}"


@dataclass(frozen=True)
class CellStats:
    source_speaker: str
    target_accent: str
    cosine: Summary
    cer: Summary


@dataclass
class TransferReport:
    cells: list[CellStats]
    cosine: Summary
    cer: Summary
    n_items: int
    skipped: list[tuple[str, str]]

    def to_dict(self) -> dict:
        def s(x: Summary):
            return {"n": x.n, "mean": x.mean, "halfwidth": x.halfwidth}

        return {
            "n_items": self.n_items,
            "n_skipped": len(self.skipped),
            "skipped": [{"path": p, "reason": r} for p, r in self.skipped],
            "overall": {"cosine_sim": s(self.cosine), "cer": s(self.cer)},
            "cells": [
                {"source_speaker": c.source_speaker, "target_accent": c.target_accent, "cosine_sim": s(c.cosine), "cer": s(c.cer)}
                for c in self.cells
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    def to_table(self) -> str:
        rows = [("source speaker", "target accent", "n", "Cosine Sim", "CER (%)")]
        for c in self.cells:
            rows.append((c.source_speaker, c.target_accent, str(c.cosine.n), c.cosine.fmt(), c.cer.fmt(100.0, 2)))
        rows.append(("overall", "", str(self.cosine.n), self.cosine.fmt(), self.cer.fmt(100.0, 2)))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.append(f"skipped: {len(self.skipped)}")
        return "\n".join(lines) + "\n"


def evaluate_transfer(
    items: Sequence[SynthItem],
    embedder: EmbeddingProvider,
    transcriber: TranscriptProvider,
    references: dict[str, EmbeddingVector],
) -> TransferReport:
    """Score every item; provider failures skip the item and are counted."""
    scored: dict[tuple[str, str], tuple[list[float], list[float]]] = {}
    skipped: list[tuple[str, str]] = []
    for item in items:
        try:
            ref = references.get(item.source_speaker)
            if ref is None:
                raise ProviderError(f"no reference embedding for speaker '{item.source_speaker}'")
            cos = cosine_similarity(embedder.embed(item.path), ref)
            cer = character_error_rate(item.reference_text, transcriber.transcribe(item.path))
        except (ProviderError, EvaluationError) as exc:
            skipped.append((item.path, str(exc)))
            continue
        cell = scored.setdefault((item.source_speaker, item.target_accent), ([], []))
        cell[0].append(cos)
        cell[1].append(cer)
    cells = [CellStats(s, a, Summary.of(v[0]), Summary.of(v[1])) for (s, a), v in sorted(scored.items())]
    all_cos = [x for v in scored.values() for x in v[0]]
    all_cer = [x for v in scored.values() for x in v[1]]
    return TransferReport(cells, Summary.of(all_cos), Summary.of(all_cer), len(items), sorted(skipped))
