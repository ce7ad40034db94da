"""Knowledge base: slot->entity lists compiled into subword prefix trees.

The tree cursor tracks *every* live suffix match simultaneously (a fresh
match may start at any token, and matches may overlap), so the completions
it reports are exactly the occurrences a brute-force scan over the token
stream would find.  The biasing mask, by contrast, reads only the deepest
live match, which reproduces single-cursor trie search.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .tokenizer import Vocabulary, normalize


@dataclass
class KnowledgeBase:
    """Ordered slots, per-slot entity lists, and a surface->canonical map."""

    slots: list[str]
    entities: dict[str, list[str]]
    aliases: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.slots)) != len(self.slots):
            raise ValueError("duplicate slot names")
        for surface, canon in self.aliases.items():
            if self.aliases.get(canon, canon) != canon:
                raise ValueError(f"alias map is not idempotent at {surface!r} -> {canon!r}")

    def canonical(self, value: str) -> str:
        return self.aliases.get(value, value)

    def pairs(self) -> Iterator[tuple[str, str]]:
        for slot in self.slots:
            for entity in self.entities[slot]:
                yield slot, entity


def load_kb(path: str | Path, vocab: Vocabulary | None = None,
            alias_path: str | Path | None = None) -> KnowledgeBase:
    """Read the slot<TAB>entity1|entity2|... file; '#' lines are comments."""
    slots: list[str] = []
    entities: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'slot<TAB>entities', got {line!r}")
        slot, values = parts
        if slot in entities:
            raise ValueError(f"{path}:{lineno}: duplicate slot {slot!r}")
        seen: list[str] = []
        for raw in values.split("|"):
            entity = normalize(raw)
            if not entity and raw.strip():
                raise ValueError(f"{path}:{lineno}: entity {raw!r} is empty after normalization")
            if entity and entity not in seen:
                seen.append(entity)
        if vocab is not None:
            for entity in seen:
                try:
                    vocab.encode_text(entity)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
        slots.append(slot)
        entities[slot] = seen
    kb = KnowledgeBase(slots=slots, entities=entities)
    if alias_path is not None:
        kb.aliases = load_aliases(alias_path)
        KnowledgeBase.__post_init__(kb)
    return kb


def load_aliases(path: str | Path) -> dict[str, str]:
    aliases: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'surface<TAB>canonical'")
        aliases[normalize(parts[0])] = normalize(parts[1])
    for canon in list(aliases.values()):
        aliases.setdefault(canon, canon)
    return aliases


def write_kb(path: str | Path, kb: KnowledgeBase) -> None:
    lines = ["# slot\tentity1|entity2|..."]
    for slot in kb.slots:
        lines.append(f"{slot}\t{'|'.join(kb.entities[slot])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_aliases(path: str | Path, aliases: dict[str, str]) -> None:
    lines = ["# surface\tcanonical"]
    lines.extend(f"{s}\t{c}" for s, c in aliases.items())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class PrefixTree:
    """Token-labelled trie; node 0 is the root.

    Entity-end flags may sit on internal nodes (one entity being a prefix of
    another is allowed).  Node encodings are attached externally by the tree
    encoder and are cleared whenever the tree changes.
    """

    __slots__ = ("slot", "tokens", "children", "entity_end", "depth", "encodings", "_agg")

    def __init__(self, slot: str = ""):
        self.slot = slot
        self.tokens: list[int] = [-1]
        self.children: list[dict[int, int]] = [{}]
        self.entity_end: list[str | None] = [None]
        self.depth: list[int] = [0]
        self.encodings = None
        self._agg: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    def add(self, entity: str, token_ids: Sequence[int]) -> None:
        node = 0
        for tok in token_ids:
            nxt = self.children[node].get(tok)
            if nxt is None:
                nxt = len(self.tokens)
                self.tokens.append(tok)
                self.children.append({})
                self.entity_end.append(None)
                self.depth.append(self.depth[node] + 1)
                self.children[node][tok] = nxt
            node = nxt
        existing = self.entity_end[node]
        if existing is not None and existing != entity:
            raise ValueError(f"entities {existing!r} and {entity!r} share one token path")
        self.entity_end[node] = entity
        self.encodings = None
        self._agg = None

    @property
    def entities(self) -> set[str]:
        return {e for e in self.entity_end if e is not None}

    def aggregation_matrix(self, dtype=np.float64) -> np.ndarray:
        """Row-normalized (self + children) averaging matrix for the GCN."""
        if self._agg is None or self._agg.dtype != dtype:
            n = len(self.tokens)
            mat = np.zeros((n, n), dtype=dtype)
            for node in range(n):
                kids = list(self.children[node].values())
                w = 1.0 / (1 + len(kids))
                mat[node, node] = w
                for kid in kids:
                    mat[node, kid] = w
            self._agg = mat
        return self._agg

    def signature(self):
        """Canonical nested structure, independent of insertion order."""

        def walk(node: int):
            kids = sorted(self.children[node].items())
            return (self.tokens[node], self.entity_end[node],
                    tuple((t, walk(k)) for t, k in kids))

        return walk(0)


def build_prefix_tree(entities: Iterable[str], vocab: Vocabulary, slot: str = "") -> PrefixTree:
    """Compile entity strings into a trie over their subword sequences."""
    tree = PrefixTree(slot=slot)
    for entity in entities:
        ids = vocab.encode_text(entity)
        if not ids:
            raise ValueError(f"entity {entity!r} produced no tokens")
        tree.add(entity, ids)
    return tree


def build_subtree(slot: str, entity_subset: Iterable[str], vocab: Vocabulary) -> PrefixTree:
    """Trie over a subset of one slot's entities (beam-search sub-tree)."""
    return build_prefix_tree(sorted(entity_subset), vocab, slot=slot)


@dataclass(frozen=True)
class AdvanceResult:
    moved: bool
    completed: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class TreeCursor:
    """Position state for scanning a token stream against one tree.

    ``active`` holds every non-root node whose path equals a suffix of the
    consumed stream, deepest first.  Value-copied freely (immutable).
    """

    tree: PrefixTree
    active: tuple[int, ...] = ()
    consumed: tuple[int, ...] = ()

    def reset(self) -> "TreeCursor":
        return replace(self, active=(), consumed=())

    def valid_next(self) -> set[int]:
        """Children tokens of the deepest live match (root when none)."""
        node = self.active[0] if self.active else 0
        return set(self.tree.children[node].keys())

    def advance(self, token: int) -> tuple["TreeCursor", AdvanceResult]:
        tree = self.tree
        entered: list[int] = []
        seen: set[int] = set()
        for node in self.active + (0,):
            child = tree.children[node].get(token)
            if child is not None and child not in seen:
                seen.add(child)
                entered.append(child)
        completed = []
        survivors = []
        for node in entered:
            entity = tree.entity_end[node]
            if entity is not None:
                completed.append((tree.slot, entity))
            if tree.children[node]:
                survivors.append(node)
        survivors.sort(key=lambda n: -tree.depth[n])
        new_cursor = replace(
            self,
            active=tuple(survivors),
            consumed=self.consumed + (token,) if entered else (),
        )
        return new_cursor, AdvanceResult(moved=bool(entered), completed=tuple(completed))

    def peek_completions(self, token: int) -> tuple[tuple[str, str], ...]:
        """Completions advance(token) would report, without moving."""
        tree = self.tree
        out = []
        seen: set[int] = set()
        for node in self.active + (0,):
            child = tree.children[node].get(token)
            if child is not None and child not in seen:
                seen.add(child)
                entity = tree.entity_end[child]
                if entity is not None:
                    out.append((tree.slot, entity))
        return tuple(out)


def cursor_for(tree: PrefixTree) -> TreeCursor:
    return TreeCursor(tree=tree)


@dataclass(frozen=True)
class BiasingConfig:
    """Training-time biasing list construction."""

    n_distractors_range: tuple[int, int] = (10, 20)
    drop_rate: float = 0.3
    same_slot_only: bool = False


def sample_training_biasing(
    reference_entities: Sequence[tuple[str, str]],
    kb: KnowledgeBase,
    cfg: BiasingConfig,
    rng: np.random.Generator,
    slots: Sequence[str] | None = None,
) -> dict[str, list[str]]:
    """Reference entities (each dropped with cfg.drop_rate) plus distractors.

    Distractors are drawn uniformly without replacement from the given slots
    (default: all slots, or the reference slots when same_slot_only is set);
    requests beyond the pool size are truncated.  Output is grouped per slot.
    """
    kept: list[tuple[str, str]] = []
    for pair in reference_entities:
        if cfg.drop_rate <= 0.0 or rng.random() >= cfg.drop_rate:
            kept.append(pair)
    if slots is None:
        if cfg.same_slot_only:
            slots = sorted({s for s, _ in reference_entities}, key=kb.slots.index)
        else:
            slots = kb.slots
    reference = set(reference_entities)  # dropped entities must stay dropped
    pool = [(s, e) for s in slots for e in kb.entities[s] if (s, e) not in reference]
    lo, hi = cfg.n_distractors_range
    want = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    want = min(want, len(pool))
    picks = rng.choice(len(pool), size=want, replace=False) if want else []
    out: dict[str, list[str]] = {}
    for slot, entity in kept + [pool[i] for i in sorted(picks)]:
        out.setdefault(slot, []).append(entity)
    return out
