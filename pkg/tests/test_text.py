import unicodedata

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyvoice.text import (
    PAD,
    PUNCTUATION,
    SPACE,
    PhonemeInventory,
    UnknownSymbolError,
    build_inventory,
    detokenize,
    normalize,
    split_segments,
    tokenize_ipa,
)

SPECIALS = (PAD, SPACE, *PUNCTUATION)


def test_specials_only_for_no_input():
    inv = build_inventory([])
    assert inv.symbols == SPECIALS
    assert inv.pad_id == 0


def test_shared_segment_appears_once():
    inv = build_inventory(["aba", "ka"])
    assert inv.symbols.count("a") == 1
    assert inv.symbols[len(SPECIALS):] == ("a", "b", "k")


def test_aba():
    inv = PhonemeInventory(SPECIALS + ("a", "b"))
    seq = tokenize_ipa("aba", inv)
    assert len(seq) == 3
    assert seq.ids == (inv.id_of("a"), inv.id_of("b"), inv.id_of("a"))
    assert detokenize(seq, inv) == "aba"


def test_affricate_matched_before_prefix():
    inv = build_inventory(["t͡ʃa", "ta", "ʃa"])
    seq = tokenize_ipa("t͡ʃata", inv)
    assert [inv.symbols[i] for i in seq.ids] == ["t͡ʃ", "a", "t", "a"]


def test_segments_keep_diacritics_and_split_stress():
    assert split_segments("ˈkʰaː") == ["ˈ", "kʰ", "aː"]
    assert split_segments("ã b") == ["ã", " ", "b"]


def test_code_switched_single_sequence():
    english, spanish = "ðə kæt", "el ɡato"
    inv = build_inventory([english, spanish])
    mixed = tokenize_ipa("ðə ɡato", inv)
    assert detokenize(mixed, inv) == "ðə ɡato"
    # same segment gets the same id regardless of source language
    a_en = tokenize_ipa("æ", inv).ids
    assert inv.symbols[a_en[0]] == "æ"
    assert tokenize_ipa("t", inv).ids == tokenize_ipa("t", build_inventory([english, spanish])).ids


def test_whitespace_is_space_token():
    inv = build_inventory(["a b"])
    seq = tokenize_ipa("a \t\n b", inv)
    assert inv.symbols[seq.ids[1]] == SPACE and len(seq) == 3


def test_unknown_symbol_reports_offset_and_codepoints():
    inv = build_inventory(["ab"])
    with pytest.raises(UnknownSymbolError) as exc:
        tokenize_ipa("abʒa", inv)
    assert exc.value.byte_offset == 2
    assert "U+0292" in str(exc.value)


def test_pad_is_never_matched():
    inv = build_inventory(["a"])
    with pytest.raises(UnknownSymbolError):
        tokenize_ipa("a_a", inv)
    assert detokenize([0], inv) == PAD


def test_empty_text_rejected():
    with pytest.raises(ValueError):
        tokenize_ipa("   ", build_inventory(["a"]))


def test_detokenize_out_of_range():
    with pytest.raises(IndexError):
        detokenize([99], build_inventory(["a"]))


def test_nfc_normalization_before_matching():
    decomposed = "ã"
    inv = build_inventory([unicodedata.normalize("NFC", decomposed)])
    assert detokenize(tokenize_ipa(decomposed, inv), inv) == "ã"


def test_inventory_file_round_trip(tmp_path):
    inv = build_inventory(["a b, t͡ʃ"])
    inv.save(tmp_path / "inv.txt")
    loaded = PhonemeInventory.load(tmp_path / "inv.txt")
    assert loaded == inv and loaded.digest() == inv.digest()


def test_inventory_invariants():
    with pytest.raises(ValueError):
        PhonemeInventory(("a", PAD))
    with pytest.raises(ValueError):
        PhonemeInventory((PAD, "a", "a"))


ipa_chars = st.sampled_from(list("aeiouptkbdgmnszʃʒŋəɪʊæɔ ːʰ̃.,") + ["t͡ʃ", "d͡ʒ", "ˈ"])


@settings(max_examples=200, deadline=None)
@given(st.lists(ipa_chars, min_size=1, max_size=12).map("".join))
def test_round_trip_equals_normalize(text):
    if not normalize(text):
        return
    inv = build_inventory([text])
    assert detokenize(tokenize_ipa(text, inv), inv) == normalize(text)


def test_round_trip_on_toy_manifest(toy_data):
    manifest, inv, _, _ = toy_data
    for record in manifest.records:
        assert detokenize(tokenize_ipa(record.ipa_text, inv), inv) == normalize(record.ipa_text)
