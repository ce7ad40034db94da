"""Slot-filling metrics: exact-pair micro F1, partial-credit SLU-F1 over word
and character bags, joint goal accuracy, and frequency-band breakdowns.

Empty prediction sets score precision 0 (not undefined).  Values are
canonicalized through the KB alias table by the callers before scoring.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .corpus import BUCKETS, bucket_name

Pair = tuple[str, str]


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _prf(credit: float, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = credit / n_pred if n_pred else 0.0
    r = credit / n_gold if n_gold else 0.0
    return p, r, _f1(p, r)


def entity_f1(preds: Sequence[Sequence[Pair]], golds: Sequence[Sequence[Pair]]) -> float:
    """Micro F1 over exact (slot, value) pairs, deduplicated per utterance."""
    tp = n_pred = n_gold = 0
    for pred, gold in zip(preds, golds):
        ps, gs = set(pred), set(gold)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    return _prf(tp, n_pred, n_gold)[2]


def _bag_f1(a: Sequence[str], b: Sequence[str]) -> float:
    ca, cb = Counter(a), Counter(b)
    overlap = sum((ca & cb).values())
    return _f1(overlap / sum(ca.values()) if ca else 0.0,
               overlap / sum(cb.values()) if cb else 0.0)


def value_credit(pred_value: str, gold_value: str) -> float:
    """Mean of word-bag F1 and character-bag F1 (spaces excluded)."""
    word = _bag_f1(pred_value.split(), gold_value.split())
    char = _bag_f1(list(pred_value.replace(" ", "")), list(gold_value.replace(" ", "")))
    return (word + char) / 2.0


def slu_f1(preds: Sequence[Sequence[Pair]], golds: Sequence[Sequence[Pair]]) -> float:
    """Micro F1 with partial credit for near-miss values of the right slot.

    Within an utterance, predicted and gold values of the same slot are
    paired in order; each pair contributes value_credit, unpaired entries
    contribute zero credit.
    """
    credit = 0.0
    n_pred = n_gold = 0
    for pred, gold in zip(preds, golds):
        pred, gold = list(dict.fromkeys(pred)), list(dict.fromkeys(gold))
        n_pred += len(pred)
        n_gold += len(gold)
        by_slot: dict[str, list[str]] = {}
        for slot, value in gold:
            by_slot.setdefault(slot, []).append(value)
        for slot, value in pred:
            queue = by_slot.get(slot)
            if queue:
                credit += value_credit(value, queue.pop(0))
    return _prf(credit, n_pred, n_gold)[2]


def jga(pred_states: Sequence[Mapping[str, str]],
        gold_states: Sequence[Mapping[str, str]]) -> float:
    """Fraction of turns whose full predicted state equals the gold state."""
    if not gold_states:
        return 0.0
    correct = sum(dict(p) == dict(g) for p, g in zip(pred_states, gold_states))
    return correct / len(gold_states)


# ----------------------------------------------------------- band breakdown

BANDS = ("overall", "f<30", "f<5", "f=0")


def band_of_count(count: int) -> list[str]:
    bands = ["overall"]
    if 0 < count < 30:
        bands.append("f<30")
    if 0 < count < 5:
        bands.append("f<5")
    if count == 0:
        bands.append("f=0")
    return bands


def _restrict(pairs: Sequence[Pair], counts: Mapping[str, int], pred) -> list[Pair]:
    return [pair for pair in pairs if pred(counts.get(pair[1], 0))]


def banded_scores(
    preds: Sequence[Sequence[Pair]],
    golds: Sequence[Sequence[Pair]],
    counts: Mapping[str, int],
) -> dict[str, dict[str, float]]:
    """SLU-F1 / Entity-F1 per frequency band and per fine bucket.

    A pair lands in a band according to its value's training count; unknown
    predicted values count as unseen.
    """
    out: dict[str, dict[str, float]] = {}
    selectors = {
        "overall": lambda c: True,
        "f<30": lambda c: 0 < c < 30,
        "f<5": lambda c: 0 < c < 5,
        "f=0": lambda c: c == 0,
    }
    for bucket in BUCKETS:
        selectors[f"bucket:{bucket}"] = (lambda b: (lambda c: bucket_name(c) == b))(bucket)
    for name, keep in selectors.items():
        p = [_restrict(pairs, counts, keep) for pairs in preds]
        g = [_restrict(pairs, counts, keep) for pairs in golds]
        out[name] = {
            "slu_f1": slu_f1(p, g),
            "entity_f1": entity_f1(p, g),
            "n_gold": sum(len(x) for x in g),
        }
    return out


@dataclass
class MetricsReport:
    wer: float
    slu_f1: float
    entity_f1: float
    bands: dict[str, dict[str, float]]
    jga: float | None = None
    per_slot: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "wer": self.wer,
            "slu_f1": self.slu_f1,
            "entity_f1": self.entity_f1,
            "bands": self.bands,
            "jga": self.jga,
            "per_slot": self.per_slot,
        }


def per_slot_scores(preds: Sequence[Sequence[Pair]],
                    golds: Sequence[Sequence[Pair]]) -> dict[str, dict[str, float]]:
    slots = sorted({s for pairs in golds for s, _ in pairs}
                   | {s for pairs in preds for s, _ in pairs})
    out = {}
    for slot in slots:
        p = [[x for x in pairs if x[0] == slot] for pairs in preds]
        g = [[x for x in pairs if x[0] == slot] for pairs in golds]
        out[slot] = {"slu_f1": slu_f1(p, g), "entity_f1": entity_f1(p, g),
                     "n_gold": sum(len(x) for x in g)}
    return out
