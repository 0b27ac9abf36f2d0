import json
import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyvoice.config import FeatureConfig
from polyvoice.evaluation import (
    CommandEmbedding,
    CommandTranscript,
    EmbeddingVector,
    EvaluationError,
    MelStatsEmbedding,
    ProviderError,
    StoredTranscript,
    Summary,
    SynthItem,
    character_error_rate,
    cosine_similarity,
    edit_distance,
    evaluate_transfer,
    parse_synth_manifest,
    providers_from_config,
    reference_embeddings,
)
from oracles import levenshtein


def vec(*v, pid="p"):
    return EmbeddingVector(np.array(v, dtype=float), pid)


@pytest.mark.parametrize(
    "a,b,expected",
    [((1, 0), (1, 0), 1.0), ((1, 0), (0, 1), 0.0), ((1, 0), (-1, 0), -1.0), ((1, 1), (1, 0), 1 / math.sqrt(2)), ((3, 4), (4, 3), 24 / 25)],
)
def test_cosine_analytic(a, b, expected):
    assert cosine_similarity(vec(*a), vec(*b)) == pytest.approx(expected, abs=1e-15)


def test_cosine_scale_invariant_and_bounded(rng):
    for _ in range(50):
        a, b = rng.normal(size=5), rng.normal(size=5)
        c = cosine_similarity(vec(*a), vec(*b))
        assert -1 <= c <= 1
        assert cosine_similarity(vec(*(a * 7.5)), vec(*(b * 0.01))) == pytest.approx(c, abs=1e-12)


def test_cosine_errors():
    with pytest.raises(EvaluationError, match="providers"):
        cosine_similarity(vec(1, 0, pid="x"), vec(1, 0, pid="y"))
    with pytest.raises(EvaluationError, match="dimension"):
        cosine_similarity(vec(1, 0), vec(1, 0, 0))
    with pytest.raises(EvaluationError, match="zero"):
        cosine_similarity(vec(0, 0), vec(1, 0))


def test_cer_hand_cases():
    assert edit_distance("kitten", "sitting") == 3
    assert character_error_rate("kitten", "sitting") == pytest.approx(0.5)
    assert character_error_rate("abc", "abc") == 0.0
    assert character_error_rate("abc", "") == 1.0
    assert character_error_rate("ab", "abxyz") == 1.5
    with pytest.raises(EvaluationError):
        character_error_rate("", "a")


def test_cer_unicode_normalization():
    composed, decomposed = "été", "été"
    assert character_error_rate(composed, decomposed) == 0.0


text = st.text(alphabet="abcə", max_size=6)


@settings(max_examples=200, deadline=None)
@given(text, text, text)
def test_edit_distance_metric_properties(a, b, c):
    d = edit_distance(a, b)
    assert d == levenshtein(a, b)
    assert d == edit_distance(b, a)
    assert (d == 0) == (a == b)
    assert edit_distance(a, c) <= d + edit_distance(b, c)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))


def test_summary_hand_computed():
    s = Summary.of([0.2, 0.4, 0.4, 0.6, 0.9])
    # mean 0.5; sample variance (0.09+0.01+0.01+0.01+0.16)/4 = 0.07
    assert s.mean == pytest.approx(0.5)
    assert s.halfwidth == pytest.approx(1.96 * math.sqrt(0.07 / 5))
    assert Summary.of([0.3]).halfwidth is None
    assert Summary.of([]).n == 0
    assert Summary.of([0.7, 0.7, 0.7]).halfwidth == 0.0


# ---------------------------------------------------------------- report


class DictEmbedder:
    provider_id = "dict"

    def __init__(self, table):
        self.table = table

    def embed(self, path):
        if path not in self.table:
            raise ProviderError(f"missing {path}")
        return EmbeddingVector(self.table[path], self.provider_id)


class DictTranscriber:
    def __init__(self, table):
        self.table = table

    def transcribe(self, path):
        return self.table[path]


def make_inputs(rng, n=12):
    items, emb, hyp = [], {}, {}
    for i in range(n):
        src, acc = f"s{i % 3}", f"a{i % 2}"
        items.append(SynthItem(f"u{i}", src, acc, "abcd"))
        emb[f"u{i}"] = rng.normal(size=4)
        hyp[f"u{i}"] = "abcd"[: int(rng.integers(1, 5))]
    refs = {f"s{k}": EmbeddingVector(rng.normal(size=4), "dict") for k in range(3)}
    return items, DictEmbedder(emb), DictTranscriber(hyp), refs


def test_cell_means_match_hand_aggregation(rng):
    items, emb, tr, refs = make_inputs(rng)
    report = evaluate_transfer(items, emb, tr, refs)
    assert len(report.cells) == 6 and report.n_items == 12 and not report.skipped
    for cell in report.cells:
        mine = [it for it in items if (it.source_speaker, it.target_accent) == (cell.source_speaker, cell.target_accent)]
        cos = [cosine_similarity(emb.embed(it.path), refs[it.source_speaker]) for it in mine]
        cer = [character_error_rate(it.reference_text, tr.transcribe(it.path)) for it in mine]
        assert cell.cosine.mean == pytest.approx(np.mean(cos), abs=1e-15)
        assert cell.cer.mean == pytest.approx(np.mean(cer), abs=1e-15)


def test_report_permutation_invariant(rng):
    items, emb, tr, refs = make_inputs(rng, 20)
    base = evaluate_transfer(items, emb, tr, refs).to_json()
    for seed in range(5):
        order = np.random.default_rng(seed).permutation(len(items))
        assert evaluate_transfer([items[i] for i in order], emb, tr, refs).to_json() == base


def test_identical_embeddings_score_one():
    emb = DictEmbedder({"x": np.array([1.0, 2.0]), "y": np.array([1.0, 2.0])})
    refs = {"s": EmbeddingVector(np.array([2.0, 4.0]), "dict")}
    items = [SynthItem("x", "s", "a", "hi"), SynthItem("y", "s", "a", "hi")]
    report = evaluate_transfer(items, emb, DictTranscriber({"x": "hi", "y": "hi"}), refs)
    assert report.cosine.mean == pytest.approx(1.0) and report.cosine.halfwidth == pytest.approx(0.0)
    assert report.cer.mean == 0.0


def test_failures_are_skipped_and_counted(rng):
    items, emb, tr, refs = make_inputs(rng, 6)
    del emb.table["u2"]
    items.append(SynthItem("u0", "nobody", "a0", "abcd"))
    report = evaluate_transfer(items, emb, tr, refs)
    assert len(report.skipped) == 2 and report.cosine.n == 5
    data = json.loads(report.to_json())
    assert data["n_skipped"] == 2 and data["n_items"] == 7
    table = report.to_table()
    assert "Cosine Sim" in table and "CER (%)" in table and "skipped: 2" in table


def test_synth_manifest(tmp_path):
    (tmp_path / "m.txt").write_text("# c\nout/a.json|spk0|acc_b|abc\n/abs/b.json|spk1|acc_a|ə\n", encoding="utf-8")
    items = parse_synth_manifest(tmp_path / "m.txt")
    assert items[0].path == str(tmp_path / "out/a.json") and items[1].path == "/abs/b.json"
    assert items[1].reference_text == "ə"
    (tmp_path / "bad.txt").write_text("a|b|c\n", encoding="utf-8")
    with pytest.raises(EvaluationError, match="bad.txt:1"):
        parse_synth_manifest(tmp_path / "bad.txt")


def test_toy_providers(tmp_path):
    mel = np.arange(12, dtype=float).reshape(4, 3)
    p = tmp_path / "o.json"
    p.write_text(json.dumps({"mel": mel.tolist(), "text": "abc"}), encoding="utf-8")
    e = MelStatsEmbedding(FeatureConfig(n_mels=4)).embed(str(p))
    assert np.allclose(e.values, [-4.5, -1.5, 1.5, 4.5])
    assert StoredTranscript().transcribe(str(p)) == "abc"
    with pytest.raises(ProviderError):
        StoredTranscript().transcribe(str(tmp_path / "missing.json"))
    refs = reference_embeddings({"s": [str(p), str(p)]}, MelStatsEmbedding())
    assert np.allclose(refs["s"].values, e.values)


def test_command_providers(tmp_path):
    script = tmp_path / "tool.py"
    script.write_text(
        "import sys\npath = sys.argv[-1]\n"
        "if 'fail' in path: sys.exit(3)\n"
        "print('1.0, 2.0 3.0' if sys.argv[1] == 'emb' else 'héllo')\n",
        encoding="utf-8",
    )
    emb = CommandEmbedding([sys.executable, str(script), "emb"], "ext")
    assert np.array_equal(emb.embed("x.wav").values, [1.0, 2.0, 3.0])
    assert CommandTranscript([sys.executable, str(script), "tr"]).transcribe("x.wav") == "héllo"
    with pytest.raises(ProviderError, match="exited 3"):
        emb.embed("fail.wav")
    with pytest.raises(ProviderError):
        CommandEmbedding(["/nonexistent/tool"]).embed("x")


def test_provider_config():
    emb, tr = providers_from_config({}, FeatureConfig())
    assert isinstance(emb, MelStatsEmbedding) and isinstance(tr, StoredTranscript)
    emb, tr = providers_from_config({"embedding": {"type": "command", "argv": ["e"], "provider_id": "z"}, "transcript": {"type": "command", "argv": ["t"]}}, FeatureConfig())
    assert emb.provider_id == "z" and tr.argv == ["t"]
    for bad in ({"embedding": {"type": "magic"}}, {"extra": {}}, {"transcript": {"type": "command"}}):
        with pytest.raises(EvaluationError):
            providers_from_config(bad, FeatureConfig())
