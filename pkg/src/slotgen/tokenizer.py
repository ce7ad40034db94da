"""Character subword vocabulary with an explicit word-end marker.

Every word is split into single characters; the final character of a word
carries the suffix marker so that word boundaries are recoverable from the
token stream alone.  ASR, the slot-value generator and the prefix trees all
share one vocabulary built from corpus text plus knowledge-base text.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

WORD_END = "▁"  # suffix marker on word-final characters

BOS = "<bos>"
EOS = "<eos>"
PAD = "<pad>"
NONE = "<none>"
SPECIALS = (BOS, EOS, PAD, NONE)

_KEEP = re.compile(r"[^a-z ]+")
_SPACES = re.compile(r" +")


def normalize(text: str) -> str:
    """Lowercase, drop non [a-z ] characters, collapse whitespace."""
    text = text.lower().replace("\t", " ").replace("\n", " ")
    text = _KEEP.sub("", text)
    return _SPACES.sub(" ", text).strip()


def _word_tokens(word: str) -> list[str]:
    return [c for c in word[:-1]] + [word[-1] + WORD_END]


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token inventory; index 0..3 are the specials in fixed order."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def none_id(self) -> int:
        return self.index[NONE]

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    def is_word_end(self, token_id: int) -> bool:
        return self.tokens[token_id].endswith(WORD_END)

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIALS)

    def encode_word(self, word: str) -> list[int]:
        """One id per character; only the last id carries the word-end marker."""
        if not word:
            raise ValueError("cannot encode an empty word")
        ids = []
        for tok in _word_tokens(word):
            tid = self.index.get(tok)
            if tid is None:
                raise ValueError(f"unknown character {tok[0]!r} in word {word!r}")
            ids.append(tid)
        return ids

    def encode_text(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in text.split():
            ids.extend(self.encode_word(word))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Invert encode_text; a trailing partial word is kept without a space."""
        parts: list[str] = []
        for tid in ids:
            tok = self.tokens[tid]
            if tok in SPECIALS:
                continue
            if tok.endswith(WORD_END):
                parts.append(tok[:-1])
                parts.append(" ")
            else:
                parts.append(tok)
        return "".join(parts).rstrip(" ")

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary file {path} does not start with the specials")
        return cls(tokens=tuple(tokens))


def build_vocab(texts: Iterable[str]) -> Vocabulary:
    """Collect every (character, marker?) token produced by tokenizing texts.

    Non-special tokens are ordered lexicographically so the mapping is
    deterministic for a given corpus.
    """
    seen: set[str] = set()
    n_texts = 0
    for text in texts:
        n_texts += 1
        for word in normalize(text).split():
            seen.update(_word_tokens(word))
    if n_texts == 0 or not seen:
        raise ValueError("empty corpus")
    return Vocabulary(tokens=SPECIALS + tuple(sorted(seen)))
