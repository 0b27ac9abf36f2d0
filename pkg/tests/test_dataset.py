import copy
import dataclasses
import os

import numpy as np
import pytest

from polyvoice.audio import AudioError, read_wav, write_wav
from polyvoice.config import FeatureConfig
from polyvoice.dataset import (
    CacheIntegrityError,
    CacheNotFoundError,
    ManifestError,
    ManifestValidationError,
    cache_features,
    compute_entry,
    load_features,
    parse_manifest,
    read_index,
    validate_dataset,
    write_manifest,
)
from polyvoice.text import build_inventory
from polyvoice.toy import synthetic_vowel

CFG = FeatureConfig()


def make_corpus(root, rows, rate=16000):
    """rows: (name, text, speaker, accent, language); writes short vowels."""
    lines = []
    for i, (name, text, spk, acc, lang) in enumerate(rows):
        write_wav(root / name, synthetic_vowel(120 + 20 * i, 0.15), rate)
        lines.append(f"{name}|{text}|{spk}|{acc}|{lang}")
    (root / "m.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root / "m.txt"


THREE = [("a.wav", "aba", "s1", "en", "eng"), ("b.wav", "ka", "s2", "en", "eng"), ("c.wav", "ab", "s1", "es", "spa")]


def test_three_lines_two_speakers(tmp_path):
    m = parse_manifest(make_corpus(tmp_path, THREE))
    assert m.n_speakers == 2 and m.n_accents == 2 and m.n_languages == 2
    assert [r.speaker_id for r in m.records] == [0, 1, 0]
    assert [r.line for r in m.records] == [1, 2, 3]
    assert m.records[0].audio_path == str(tmp_path / "a.wav")


def test_empty_manifest(tmp_path):
    (tmp_path / "m.txt").write_text("# only a comment\n\n", encoding="utf-8")
    with pytest.raises(ManifestError, match="empty manifest"):
        parse_manifest(tmp_path / "m.txt")


def test_four_fields_names_line(tmp_path):
    (tmp_path / "m.txt").write_text("a.wav|a|s|acc|l\nb.wav|a|s|acc\n", encoding="utf-8")
    with pytest.raises(ManifestError, match=":2:"):
        parse_manifest(tmp_path / "m.txt")


def test_duplicate_path(tmp_path):
    (tmp_path / "m.txt").write_text("a.wav|a|s|acc|l\n./a.wav|b|s|acc|l\n", encoding="utf-8")
    with pytest.raises(ManifestValidationError, match="duplicate"):
        parse_manifest(tmp_path / "m.txt")


def test_sample_rate_directive_and_comments(tmp_path):
    (tmp_path / "m.txt").write_text("# sample_rate=22050\n# hello\na.wav|a|s|acc|l\n", encoding="utf-8")
    m = parse_manifest(tmp_path / "m.txt")
    assert m.sample_rate_hz == 22050 and m.comments == ["hello"]


def test_write_then_parse(tmp_path):
    m = parse_manifest(make_corpus(tmp_path, THREE))
    (tmp_path / "sub").mkdir()
    write_manifest(m, tmp_path / "sub" / "copy.txt")
    again = parse_manifest(tmp_path / "sub" / "copy.txt")
    assert again.speakers == m.speakers and again.accents == m.accents
    assert [(r.audio_path, r.ipa_text, r.speaker_id) for r in again.records] == [(r.audio_path, r.ipa_text, r.speaker_id) for r in m.records]


def test_low_resource_flags(tmp_path):
    rows = [(f"{i}.wav", "a", f"s{i}", f"acc{i}", f"l{i}") for i in range(7)]
    report = validate_dataset(parse_manifest(make_corpus(tmp_path, rows)))
    assert report.ok and sorted(report.low_resource_accents) == sorted(f"acc{i}" for i in range(7))


def test_three_speaker_accent_not_flagged(tmp_path):
    rows = [(f"{i}.wav", "a", f"s{i}", "shared", "l") for i in range(3)]
    report = validate_dataset(parse_manifest(make_corpus(tmp_path, rows)))
    assert report.speakers_per_accent == {"shared": 3} and report.low_resource_accents == []


def test_validation_reports_missing_and_is_pure(tmp_path):
    m = parse_manifest(make_corpus(tmp_path, THREE))
    os.remove(tmp_path / "b.wav")
    before = copy.deepcopy(m)
    listing = sorted(os.listdir(tmp_path))
    report = validate_dataset(m)
    assert not report.ok and report.missing_files == [str(tmp_path / "b.wav")]
    assert "b.wav" in report.summary()
    assert m == before and sorted(os.listdir(tmp_path)) == listing


def test_rate_mismatch_reported(tmp_path):
    m = parse_manifest(make_corpus(tmp_path, THREE, rate=8000))
    assert len(validate_dataset(m).rate_mismatches) == 3


def test_audio_errors(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav")
    with pytest.raises(AudioError):
        read_wav(tmp_path / "junk.wav")
    write_wav(tmp_path / "ok.wav", np.zeros(100), 8000)
    with pytest.raises(AudioError, match="8000"):
        read_wav(tmp_path / "ok.wav", expected_rate=16000)


def test_cache_round_trip_and_idempotence(tmp_path):
    m = parse_manifest(make_corpus(tmp_path, THREE))
    inv = build_inventory([m])
    out = tmp_path / "cache"
    first = cache_features(m, CFG, out, inv)
    assert first.written == 3 and first.skipped == 0 and not first.errors
    assert cache_features(m, CFG, out, inv).written == 0
    for record, key in zip(m.records, first.keys):
        assert load_features(key, out).equals(compute_entry(record, key, CFG, inv))
    index = read_index(out)
    assert set(index["entries"]) == set(first.keys) and index["config_hash"] == first.config_hash
    changed = cache_features(m, dataclasses.replace(CFG, hop=128), out, inv)
    assert changed.written == 3 and changed.config_hash != first.config_hash


def test_parallel_cache_matches_serial(tmp_path):
    m = parse_manifest(make_corpus(tmp_path, THREE))
    a = cache_features(m, CFG, tmp_path / "a", workers=1)
    b = cache_features(m, CFG, tmp_path / "b", workers=3)
    assert a.keys == b.keys
    for k in a.keys:
        assert (tmp_path / "a" / f"{k}.pvf").read_bytes() == (tmp_path / "b" / f"{k}.pvf").read_bytes()


def test_unreadable_audio_continues(tmp_path):
    m = parse_manifest(make_corpus(tmp_path, THREE))
    (tmp_path / "b.wav").write_bytes(b"broken")
    summary = cache_features(m, CFG, tmp_path / "cache")
    assert summary.written == 2 and len(summary.errors) == 1 and summary.keys[1] is None


def test_missing_key_and_corruption(tmp_path):
    m = parse_manifest(make_corpus(tmp_path, THREE[:1]))
    summary = cache_features(m, CFG, tmp_path / "cache")
    with pytest.raises(CacheNotFoundError):
        load_features("nope", tmp_path / "cache")
    path = tmp_path / "cache" / f"{summary.keys[0]}.pvf"
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CacheIntegrityError, match="checksum"):
        load_features(summary.keys[0], tmp_path / "cache")
