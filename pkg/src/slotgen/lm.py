"""Word-level language models: the text LM feeding per-word states to the
value generator, and the class LM that shortlists slot types from decoded
word history."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Utterance
from .layers import Embedding, Linear, Lstm, Module

W_BOS, W_EOS, W_UNK, W_SEP = "<bos>", "<eos>", "<unk>", "<sep>"
WORD_SPECIALS = (W_BOS, W_EOS, W_UNK, W_SEP)


@dataclass(frozen=True)
class WordVocab:
    words: tuple[str, ...]

    @property
    def index(self) -> dict[str, int]:
        cached = getattr(self, "_index", None)
        if cached is None:
            cached = {w: i for i, w in enumerate(self.words)}
            object.__setattr__(self, "_index", cached)
        return cached

    def __len__(self):
        return len(self.words)

    def id(self, word: str) -> int:
        return self.index.get(word, self.index[W_UNK])

    def ids(self, words: Sequence[str]) -> list[int]:
        return [self.id(w) for w in words]


def build_word_vocab(texts: Iterable[str]) -> WordVocab:
    seen: set[str] = set()
    for text in texts:
        seen.update(text.split())
    return WordVocab(words=WORD_SPECIALS + tuple(sorted(seen)))


class WordLm(Module):
    """Unidirectional word LSTM LM; per-word hidden states feed the generator."""

    def __init__(self, rng, word_vocab: WordVocab, d_hidden: int = 64, dtype=np.float64):
        self.vocab = word_vocab
        self.embed = Embedding(rng, len(word_vocab), d_hidden, dtype=dtype)
        self.lstm = Lstm(rng, d_hidden, d_hidden, dtype=dtype)
        self.out = Linear(rng, d_hidden, len(word_vocab), dtype=dtype)
        self.d_hidden = d_hidden

    def lm_loss(self, text: str) -> Tensor:
        """Mean next-word NLL of the text (with end-of-sequence target)."""
        words = text.split()
        ids_in = np.array(self.vocab.ids([W_BOS] + words), dtype=np.int64)
        targets = np.array(self.vocab.ids(words + [W_EOS]), dtype=np.int64)
        h = self.lstm(self.embed(ids_in))
        return ad.tmean(ad.cross_entropy_rows(self.out(h), targets))

    def states(self, words: Sequence[str], history: Sequence[str] = ()) -> Tensor:
        """Hidden state after each of ``words`` (graph path, history prefixed)."""
        full = [W_BOS, *history, *words]
        ids = np.array(self.vocab.ids(full), dtype=np.int64)
        h = self.lstm(self.embed(ids))
        n_pre = 1 + len(history)
        return h[n_pre:]

    def stream(self, history: Sequence[str] = ()) -> "LmStream":
        return LmStream(self, history)

    def log_prob(self, text: str) -> tuple[float, int]:
        """(total log-probability incl. the end target, number of terms)."""
        words = text.split()
        with ad.no_grad():
            ids_in = np.array(self.vocab.ids([W_BOS] + words), dtype=np.int64)
            targets = np.array(self.vocab.ids(words + [W_EOS]), dtype=np.int64)
            h = self.lstm(self.embed(ids_in))
            nll = ad.cross_entropy_rows(self.out(h), targets)
        return float(-nll.data.sum()), len(targets)


class LmStream:
    """Incremental word-by-word LM advancement for generation."""

    def __init__(self, lm: WordLm, history: Sequence[str] = ()):
        self.lm = lm
        self.state = lm.lstm.zero_state()
        self.h = np.zeros(lm.d_hidden, dtype=lm.embed.weight.data.dtype)
        for word in [W_BOS, *history]:
            self.advance(word)

    def advance(self, word: str) -> np.ndarray:
        x = self.lm.embed.raw([self.lm.vocab.id(word)])[0]
        self.h, self.state = self.lm.lstm.step(x, self.state)
        return self.h

    def copy(self) -> "LmStream":
        dup = object.__new__(LmStream)
        dup.lm = self.lm
        dup.state = self.state
        dup.h = self.h
        return dup


class SlotPredictor(Module):
    """Class LM: predicts which slot's entity (if any) starts at the next word."""

    NONE_LABEL = "<none>"

    def __init__(self, rng, word_vocab: WordVocab, slots: Sequence[str],
                 d_hidden: int = 64, dtype=np.float64):
        self.vocab = word_vocab
        self.slots = list(slots)
        self.labels = self.slots + [self.NONE_LABEL]
        self.embed = Embedding(rng, len(word_vocab), d_hidden, dtype=dtype)
        self.lstm = Lstm(rng, d_hidden, d_hidden, dtype=dtype)
        self.out = Linear(rng, d_hidden, len(self.labels), dtype=dtype)

    def training_labels(self, utt: Utterance) -> list[int]:
        """Per word position: index of the slot whose entity starts there."""
        words = utt.transcript.split()
        labels = [len(self.slots)] * len(words)
        for slot, value in utt.gold:
            vw = value.split()
            for start in range(len(words) - len(vw) + 1):
                if words[start : start + len(vw)] == vw:
                    labels[start] = self.slots.index(slot)
                    break
        return labels

    def loss(self, utt: Utterance) -> Tensor:
        words = utt.transcript.split()
        labels = np.array(self.training_labels(utt), dtype=np.int64)
        ids_in = np.array(self.vocab.ids([W_BOS] + words[:-1]), dtype=np.int64)
        h = self.lstm(self.embed(ids_in))
        return ad.tmean(ad.cross_entropy_rows(self.out(h), labels))

    def posterior(self, history_words: Sequence[str]) -> np.ndarray:
        """P(label | word history) after consuming the history."""
        with ad.no_grad():
            ids = np.array(self.vocab.ids([W_BOS, *history_words]), dtype=np.int64)
            h = self.lstm(self.embed(ids))
            logits = self.out(h[-1:])
        return ad.softmax_raw(logits.data)[0]
