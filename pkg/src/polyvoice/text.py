"""Shared IPA token inventory and tokenizer.

One table serves every language, so the same segment always maps to the
same id and code-switched input needs no language delimiters. Input is
already IPA; there is no grapheme-to-phoneme step.
"""

from __future__ import annotations

import hashlib
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD = "_"
SPACE = " "
PUNCTUATION = tuple(".,!?;:-\"'()¿¡…")
# stress marks stand alone instead of attaching to the previous segment
_STANDALONE_MODIFIERS = {"ˈ", "ˌ"}
_TIE_BARS = {"͡", "͜"}
_WS = re.compile(r"\s+")


class UnknownSymbolError(ValueError):
    def __init__(self, text: str, char_offset: int):
        byte_offset = len(text[:char_offset].encode("utf-8"))
        snippet = text[char_offset : char_offset + 3]
        codepoints = " ".join(f"U+{ord(c):04X}" for c in snippet)
        super().__init__(f"no inventory symbol matches at byte offset {byte_offset}: {snippet!r} ({codepoints})")
        self.byte_offset = byte_offset
        self.char_offset = char_offset
        self.codepoints = codepoints


def normalize(text: str) -> str:
    """NFC-normalize and collapse whitespace runs to a single space."""
    return _WS.sub(SPACE, unicodedata.normalize("NFC", text)).strip()


def _attaches(ch: str) -> bool:
    if ch in _STANDALONE_MODIFIERS:
        return False
    return unicodedata.combining(ch) != 0 or unicodedata.category(ch) == "Lm"


def split_segments(text: str) -> list[str]:
    """Split normalized IPA into segments.

    A segment is a base character plus any following combining diacritics and
    modifier letters (length, aspiration, palatalization). A tie bar joins the
    next base character into the same segment, so affricates like t͡ʃ stay whole.
    """
    segments: list[str] = []
    for ch in normalize(text):
        if ch == SPACE:
            segments.append(ch)
            continue
        if segments and segments[-1] != SPACE and segments[-1] not in PUNCTUATION:
            prev = segments[-1]
            if _attaches(ch) or prev[-1] in _TIE_BARS:
                segments[-1] = prev + ch
                continue
        segments.append(ch)
    return segments


@dataclass(frozen=True)
class PhonemeInventory:
    symbols: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)
    _max_len: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != PAD:
            raise ValueError("index 0 must be the pad symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("inventory symbols must be unique")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})
        object.__setattr__(self, "_max_len", max(len(s) for s in self.symbols))

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def id_of(self, symbol: str) -> int:
        return self._index[symbol]

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def space_id(self) -> int:
        return self._index[SPACE]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PhonemeInventory":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    source_text: str

    def __len__(self) -> int:
        return len(self.ids)


def build_inventory(texts_or_manifests: Iterable) -> PhonemeInventory:
    """Union of every segment seen in any manifest, plus the special symbols.

    Accepts manifests (anything with ``records``) or plain IPA strings. New
    segments are appended in first-appearance order.
    """
    symbols = [PAD, SPACE, *PUNCTUATION]
    seen = set(symbols)
    for item in texts_or_manifests:
        texts = [r.ipa_text for r in item.records] if hasattr(item, "records") else [item]
        for text in texts:
            for seg in split_segments(text):
                if seg not in seen:
                    seen.add(seg)
                    symbols.append(seg)
    return PhonemeInventory(tuple(symbols))


def tokenize_ipa(text: str, inventory: PhonemeInventory) -> TokenSequence:
    """Greedy longest-match segmentation against the inventory."""
    norm = normalize(text)
    if not norm:
        raise ValueError("text is empty after normalization")
    ids: list[int] = []
    i = 0
    n = len(norm)
    while i < n:
        for length in range(min(inventory._max_len, n - i), 0, -1):
            piece = norm[i : i + length]
            if piece != PAD and piece in inventory:
                ids.append(inventory.id_of(piece))
                i += length
                break
        else:
            raise UnknownSymbolError(norm, i)
    return TokenSequence(tuple(ids), text)


def detokenize(tokens: TokenSequence | Sequence[int], inventory: PhonemeInventory) -> str:
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
    out = []
    for i in ids:
        if not 0 <= i < len(inventory):
            raise IndexError(f"token id {i} outside inventory of size {len(inventory)}")
        out.append(inventory.symbols[i])
    return "".join(out)
