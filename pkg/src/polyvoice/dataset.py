"""Dataset manifests, validation, and the on-disk feature cache.

Manifest lines are ``audio_path|ipa_text|speaker|accent|language``; the last
three fields are labels mapped to dense ids in first-appearance order. Lines
starting with ``#`` are comments, except ``# sample_rate=<hz>`` which sets the
manifest rate. Relative audio paths resolve against the manifest directory.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioError, read_wav, wav_sample_rate
from .config import FeatureConfig
from .features import EnergyTrack, FeatureError, MelSpectrogram, PitchTrack, extract_all
from .text import PhonemeInventory, build_inventory, tokenize_ipa

DEFAULT_SAMPLE_RATE = 16000
CACHE_MAGIC = b"PVFC"
CACHE_VERSION = 1
INDEX_NAME = "index.json"


class ManifestError(ValueError):
    """Malformed manifest text."""


class ManifestValidationError(ManifestError):
    """Well-formed lines that are inconsistent with each other."""


class CacheNotFoundError(KeyError):
    pass


class CacheIntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    audio_path: str
    ipa_text: str
    speaker_id: int
    accent_id: int
    language_id: int
    line: int = 0


@dataclass
class DatasetManifest:
    records: list[UtteranceRecord]
    speakers: list[str]
    accents: list[str]
    languages: list[str]
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    comments: list[str] = field(default_factory=list)

    def __post_init__(self):
        for attr, labels in (("speaker_id", self.speakers), ("accent_id", self.accents), ("language_id", self.languages)):
            used = {getattr(r, attr) for r in self.records}
            if used and (min(used) < 0 or max(used) >= len(labels)):
                raise ManifestValidationError(f"{attr} outside the label table")

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    @property
    def n_accents(self) -> int:
        return len(self.accents)

    @property
    def n_languages(self) -> int:
        return len(self.languages)


def parse_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    maps: tuple[dict[str, int], dict[str, int], dict[str, int]] = ({}, {}, {})
    records: list[UtteranceRecord] = []
    comments: list[str] = []
    seen_paths: dict[str, int] = {}
    sample_rate = DEFAULT_SAMPLE_RATE
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("sample_rate="):
                try:
                    sample_rate = int(body.split("=", 1)[1])
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: bad sample_rate directive") from None
            else:
                comments.append(body)
            continue
        parts = [p.strip() for p in raw.split("|")]
        if len(parts) != 5 or not all(parts):
            raise ManifestError(f"{path}:{lineno}: expected 5 nonempty '|'-separated fields, got {len(parts)}")
        audio, text, *labels = parts
        resolved = audio if os.path.isabs(audio) else os.path.normpath(str(base / audio))
        if resolved in seen_paths:
            raise ManifestValidationError(
                f"{path}:{lineno}: duplicate audio_path {audio!r} (first on line {seen_paths[resolved]})"
            )
        seen_paths[resolved] = lineno
        ids = [m.setdefault(label, len(m)) for m, label in zip(maps, labels)]
        records.append(UtteranceRecord(resolved, text, ids[0], ids[1], ids[2], lineno))
    if not records:
        raise ManifestError(f"{path}: empty manifest")
    speakers, accents, languages = (list(m) for m in maps)
    return DatasetManifest(records, speakers, accents, languages, sample_rate, comments)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = [f"# sample_rate={manifest.sample_rate_hz}"]
    lines += [f"# {c}" for c in manifest.comments]
    for r in manifest.records:
        audio = Path(r.audio_path).resolve()
        try:
            shown = str(audio.relative_to(base))
        except ValueError:
            shown = str(audio)
        lines.append(
            "|".join(
                [shown, r.ipa_text, manifest.speakers[r.speaker_id], manifest.accents[r.accent_id], manifest.languages[r.language_id]]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class ValidationReport:
    missing_files: list[str]
    unreadable_files: list[str]
    rate_mismatches: list[tuple[str, int]]
    speakers_per_accent: dict[str, int]
    low_resource_accents: list[str]

    @property
    def ok(self) -> bool:
        return not (self.missing_files or self.unreadable_files or self.rate_mismatches)

    def summary(self) -> str:
        lines = [f"accent {a}: {n} speaker(s)" + (" [low-resource]" if a in self.low_resource_accents else "")
                 for a, n in self.speakers_per_accent.items()]
        lines += [f"missing: {p}" for p in self.missing_files]
        lines += [f"unreadable: {p}" for p in self.unreadable_files]
        lines += [f"sample rate {rate} Hz: {p}" for p, rate in self.rate_mismatches]
        return "\n".join(lines)


def validate_dataset(manifest: DatasetManifest) -> ValidationReport:
    """Report missing/unreadable audio and the speakers-per-accent histogram.

    An accent with exactly one speaker is flagged low-resource.
    """
    missing, unreadable, mismatched = [], [], []
    for r in manifest.records:
        if not os.path.isfile(r.audio_path):
            missing.append(r.audio_path)
            continue
        try:
            rate = wav_sample_rate(r.audio_path)
        except (OSError, ValueError):
            unreadable.append(r.audio_path)
            continue
        if rate != manifest.sample_rate_hz:
            mismatched.append((r.audio_path, rate))
    speakers: dict[int, set[int]] = {}
    for r in manifest.records:
        speakers.setdefault(r.accent_id, set()).add(r.speaker_id)
    histogram = {manifest.accents[a]: len(speakers.get(a, ())) for a in range(manifest.n_accents)}
    low = [a for a, n in histogram.items() if n == 1]
    return ValidationReport(missing, unreadable, mismatched, histogram, low)


@dataclass(frozen=True)
class FeatureCacheEntry:
    key: str
    mel: MelSpectrogram
    pitch: PitchTrack
    energy: EnergyTrack
    token_ids: np.ndarray

    def __post_init__(self):
        n = self.mel.n_frames
        if len(self.pitch) != n or len(self.energy) != n:
            raise CacheIntegrityError(f"frame counts disagree: mel {n}, pitch {len(self.pitch)}, energy {len(self.energy)}")

    def equals(self, other: "FeatureCacheEntry") -> bool:
        return (
            self.key == other.key
            and self.mel.hop_length == other.mel.hop_length
            and self.mel.sample_rate == other.mel.sample_rate
            and np.array_equal(self.mel.values, other.mel.values)
            and np.array_equal(self.pitch.f0_hz, other.pitch.f0_hz)
            and np.array_equal(self.pitch.voiced_mask, other.pitch.voiced_mask)
            and np.array_equal(self.energy.values, other.energy.values)
            and np.array_equal(self.token_ids, other.token_ids)
        )


def cache_key(audio_path: str, config_hash: str) -> str:
    return hashlib.sha256(f"{audio_path}\0{config_hash}".encode("utf-8")).hexdigest()[:24]


def cache_config_hash(config: FeatureConfig, inventory: PhonemeInventory) -> str:
    # token ids are cached too, so the inventory is part of the cache identity
    return hashlib.sha256(f"{config.digest()}:{inventory.digest()}".encode()).hexdigest()[:16]


_HEADER = struct.Struct("<4sHI")
_SHAPE = struct.Struct("<IIIIIH")


def _encode_entry(entry: FeatureCacheEntry) -> bytes:
    key = entry.key.encode("utf-8")
    mel = np.ascontiguousarray(entry.mel.values, dtype="<f4")
    body = b"".join(
        [
            _SHAPE.pack(mel.shape[0], mel.shape[1], len(entry.token_ids), entry.mel.hop_length, entry.mel.sample_rate, len(key)),
            key,
            mel.tobytes(),
            np.asarray(entry.pitch.f0_hz, dtype="<f4").tobytes(),
            np.asarray(entry.pitch.voiced_mask, dtype=np.uint8).tobytes(),
            np.asarray(entry.energy.values, dtype="<f4").tobytes(),
            np.asarray(entry.token_ids, dtype="<i4").tobytes(),
        ]
    )
    return _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, zlib.crc32(body)) + body


def _decode_entry(blob: bytes, where: str) -> FeatureCacheEntry:
    if len(blob) < _HEADER.size + _SHAPE.size:
        raise CacheIntegrityError(f"{where}: truncated entry")
    magic, version, checksum = _HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise CacheIntegrityError(f"{where}: bad magic/version")
    body = blob[_HEADER.size :]
    if zlib.crc32(body) != checksum:
        raise CacheIntegrityError(f"{where}: checksum mismatch")
    n_mels, n_frames, n_tokens, hop, rate, key_len = _SHAPE.unpack_from(body)
    pos = _SHAPE.size

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr.copy()

    key = body[pos : pos + key_len].decode("utf-8")
    pos += key_len
    mel = take("<f4", n_mels * n_frames).reshape(n_mels, n_frames)
    f0 = take("<f4", n_frames)
    voiced = take(np.uint8, n_frames).astype(bool)
    energy = take("<f4", n_frames)
    tokens = take("<i4", n_tokens)
    return FeatureCacheEntry(key, MelSpectrogram(mel, hop, rate), PitchTrack(f0, voiced), EnergyTrack(energy), tokens)


def write_entry(entry: FeatureCacheEntry, directory: str | Path) -> Path:
    path = Path(directory) / f"{entry.key}.pvf"
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(_encode_entry(entry))
    os.replace(tmp, path)
    return path


def load_features(key: str, directory: str | Path) -> FeatureCacheEntry:
    path = Path(directory) / f"{key}.pvf"
    if not path.is_file():
        raise CacheNotFoundError(key)
    entry = _decode_entry(path.read_bytes(), str(path))
    if entry.key != key:
        raise CacheIntegrityError(f"{path}: stored key {entry.key!r} does not match file name")
    return entry


def read_index(directory: str | Path) -> dict:
    path = Path(directory) / INDEX_NAME
    if not path.is_file():
        return {"format": CACHE_VERSION, "entries": {}}
    return json.loads(path.read_text(encoding="utf-8"))


def _write_index(directory: Path, index: dict) -> None:
    tmp = directory / (INDEX_NAME + ".tmp")
    tmp.write_text(json.dumps(index, indent=1, sort_keys=True), encoding="utf-8")
    os.replace(tmp, directory / INDEX_NAME)


@dataclass
class CacheSummary:
    written: int
    skipped: int
    errors: list[tuple[str, str]]
    keys: list[str | None]
    config_hash: str


def compute_entry(record: UtteranceRecord, key: str, config: FeatureConfig, inventory: PhonemeInventory) -> FeatureCacheEntry:
    samples, _ = read_wav(record.audio_path, expected_rate=config.sample_rate)
    mel, pitch, energy = extract_all(samples, config)
    tokens = np.asarray(tokenize_ipa(record.ipa_text, inventory).ids, dtype=np.int32)
    # store exactly what the 32-bit cache will hold so fresh and loaded entries agree
    return FeatureCacheEntry(
        key,
        MelSpectrogram(mel.values.astype(np.float32), mel.hop_length, mel.sample_rate),
        PitchTrack(pitch.f0_hz.astype(np.float32), pitch.voiced_mask.copy()),
        EnergyTrack(energy.values.astype(np.float32)),
        tokens,
    )


def cache_features(
    manifest: DatasetManifest,
    config: FeatureConfig,
    out_dir: str | Path,
    inventory: PhonemeInventory | None = None,
    workers: int = 1,
) -> CacheSummary:
    """Extract and store one entry per record, skipping keys already cached.

    Per-record failures are collected in the summary; the run continues.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if inventory is None:
        inventory = build_inventory([manifest])
    config_hash = cache_config_hash(config, inventory)
    index = read_index(out)
    entries = index.setdefault("entries", {})
    keys = [cache_key(r.audio_path, config_hash) for r in manifest.records]
    todo = [(r, k) for r, k in zip(manifest.records, keys) if not (k in entries and (out / f"{k}.pvf").is_file())]

    def work(item):
        record, key = item
        try:
            write_entry(compute_entry(record, key, config, inventory), out)
            return None
        except (AudioError, FeatureError, ValueError, OSError) as exc:
            return (record.audio_path, str(exc))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(item) for item in todo]

    errors = [r for r in results if r is not None]
    failed = {path for path, _ in errors}
    for record, key in todo:
        if record.audio_path not in failed:
            entries[key] = {"audio_path": record.audio_path, "config_hash": config_hash}
    index["format"] = CACHE_VERSION
    index["config_hash"] = config_hash
    _write_index(out, index)
    written = len(todo) - len(errors)
    final_keys = [None if r.audio_path in failed else k for r, k in zip(manifest.records, keys)]
    return CacheSummary(written, len(manifest.records) - len(todo), errors, final_keys, config_hash)
