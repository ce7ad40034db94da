"""Tree-constrained pointer generator: masked attention over valid prefix-tree
nodes yields a copy distribution that is interpolated with the model
distribution through a generation probability.

Used twice, with one shared tree encoder: on the ASR side (query from the
attention context and previous token embedding) and on the value-generator
side (query from the generator hidden state).  The class LM shortlist picks
which slot trees participate at each word.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kb import PrefixTree, TreeCursor
from .layers import Linear, Module
from .lm import SlotPredictor

P_GEN_MAX = 0.9  # keeps the model route alive early in training


@dataclass
class Shortlist:
    slots: list[str]
    scores: list[float]


def shortlist_predict(clm: SlotPredictor, word_history: Sequence[str], k: int = 2) -> Shortlist:
    """Top-k slot types by CLM posterior; ties broken by KB slot order."""
    post = clm.posterior(word_history)[: len(clm.slots)]
    order = np.argsort(-post, kind="stable")[:k]
    return Shortlist(slots=[clm.slots[i] for i in order],
                     scores=[float(post[i]) for i in order])


class PointerHead(Module):
    """Per-side projections: query map plus the generation-probability gate."""

    def __init__(self, rng, d_query_in: int, d_state: int, d_tree: int, dtype=np.float64):
        self.query = Linear(rng, d_query_in, d_tree, dtype=dtype)
        self.gate = Linear(rng, d_state + d_tree, 1, dtype=dtype)


@dataclass
class StepDistributions:
    """All distributions at one decode step (numpy, inference path)."""

    p_mdl: np.ndarray | None
    p_ptr_joint: dict[tuple[str, int], float]
    p_ptr: np.ndarray | None
    p_gen: float
    p_final: np.ndarray | None
    empty: bool
    attn_context: np.ndarray | None = None
    valid: list[tuple[str, int]] = field(default_factory=list)


def _valid_nodes(slot_cursors: Sequence[tuple[PrefixTree, TreeCursor]]):
    """(tree, node, slot, token) for every valid child across the trees."""
    out = []
    for tree, cursor in slot_cursors:
        node = cursor.active[0] if cursor.active else 0
        for tok, child in sorted(tree.children[node].items()):
            out.append((tree, child, tree.slot, tok))
    return out


def step(
    query_input: np.ndarray,
    slot_cursors: Sequence[tuple[PrefixTree, TreeCursor]],
    head: PointerHead,
    vocab_size: int,
) -> StepDistributions:
    """Pointer distribution over the valid children of the shortlisted trees.

    query_input is the raw query source ([context; prev-token embedding] on
    the ASR side, the generator hidden state on the SVG side); every tree must
    carry encodings.  Returns the joint and marginal copy distributions plus
    the attention context; p_gen/p_final are filled in by the caller via
    gen_prob/interpolate.
    """
    entries = _valid_nodes(slot_cursors)
    if not entries:
        return StepDistributions(p_mdl=None, p_ptr_joint={}, p_ptr=None,
                                 p_gen=0.0, p_final=None, empty=True)
    keys = np.stack([tree.encodings[node] for tree, node, _, _ in entries])
    q = head.query.raw(query_input)
    scores = keys @ q / np.sqrt(keys.shape[1])
    weights = ad.softmax_raw(scores)
    attn_context = weights @ keys
    p_ptr = np.zeros(vocab_size, dtype=keys.dtype)
    joint: dict[tuple[str, int], float] = {}
    for w, (_, _, slot, tok) in zip(weights, entries):
        p_ptr[tok] += w
        joint[(slot, tok)] = joint.get((slot, tok), 0.0) + float(w)
    return StepDistributions(p_mdl=None, p_ptr_joint=joint, p_ptr=p_ptr,
                             p_gen=0.0, p_final=None, empty=False,
                             attn_context=attn_context,
                             valid=[(slot, tok) for _, _, slot, tok in entries])


def gen_prob(h_state: np.ndarray, attn_context: np.ndarray, head: PointerHead,
             p_gen_max: float = P_GEN_MAX) -> float:
    """Sigmoid gate on [decoder state; attended node encoding], clamped."""
    z = head.gate.raw(np.concatenate([h_state, attn_context]))
    return min(float(ad.sigmoid_raw(z)[0]), p_gen_max)


def interpolate(p_mdl: np.ndarray, p_ptr: np.ndarray | None, p_gen: float) -> np.ndarray:
    """Convex combination of model and pointer distributions.

    The endpoints are exact: p_gen == 0 (or an empty pointer) returns p_mdl
    itself, p_gen == 1 returns p_ptr itself.
    """
    if p_ptr is None or p_gen == 0.0:
        return p_mdl
    if p_gen == 1.0:
        return p_ptr
    return p_mdl * (1.0 - p_gen) + p_ptr * p_gen


# ------------------------------------------------------- vectorized training

@dataclass
class TreeBatch:
    """Shortlisted trees prepared for a whole teacher-forced pass.

    node_matrix: constant (total nodes, vocab) one-hot of node tokens;
    encodings: (total nodes, d_tree) concatenated tree encodings (graph);
    masks per step are built by walking cursors along the reference tokens.
    """

    trees: list[PrefixTree]
    encodings: Tensor
    node_matrix: np.ndarray
    offsets: list[int]

    @classmethod
    def build(cls, trees: list[PrefixTree], encodings: list[Tensor], vocab_size: int) -> "TreeBatch":
        offsets = []
        total = 0
        for tree in trees:
            offsets.append(total)
            total += len(tree)
        node_matrix = np.zeros((total, vocab_size))
        for tree, off in zip(trees, offsets):
            for node in range(1, len(tree)):
                node_matrix[off + node, tree.tokens[node]] = 1.0
        return cls(trees=trees, encodings=ad.concat(encodings, axis=0),
                   node_matrix=node_matrix, offsets=offsets)

    def step_masks(self, token_stream: Sequence[int]) -> np.ndarray:
        """Valid-node mask for each step of [<start>, t1, ..., tn].

        Row r marks the children of each tree cursor after consuming the
        first r stream tokens (row 0: root children).
        """
        n_rows = len(token_stream) + 1
        mask = np.zeros((n_rows, self.node_matrix.shape[0]), dtype=bool)
        for tree, off in zip(self.trees, self.offsets):
            cursor = TreeCursor(tree=tree)
            node = 0
            mask[0, [off + c for c in tree.children[node].values()]] = True
            for r, tok in enumerate(token_stream, start=1):
                cursor, _ = cursor.advance(tok)
                node = cursor.active[0] if cursor.active else 0
                kids = tree.children[node].values()
                if kids:
                    mask[r, [off + c for c in kids]] = True
        return mask


def pointer_rows(
    queries_in: Tensor,
    states: Tensor,
    batch: TreeBatch,
    mask: np.ndarray,
    head: PointerHead,
    p_gen_max: float = P_GEN_MAX,
) -> tuple[Tensor, Tensor]:
    """Marginal pointer distribution and gated p_gen for every step at once.

    queries_in: (n, d_query_in) raw query inputs; states: (n, d_state) the
    gate's state channel.  Rows whose mask is all false get p_gen exactly 0
    and a zero pointer row, so interpolation leaves the model distribution
    untouched there.
    """
    q = head.query(queries_in)
    scale = 1.0 / float(np.sqrt(q.shape[-1]))
    scores = ad.mul(ad.matmul(q, ad.transpose(batch.encodings)), scale)
    weights = ad.masked_softmax(scores, mask)
    attn_ctx = ad.matmul(weights, batch.encodings)
    p_ptr = ad.matmul(weights, Tensor(batch.node_matrix.astype(q.dtype)))
    gate = ad.sigmoid(head.gate(ad.concat([states, attn_ctx], axis=1)))
    row_any = mask.any(axis=1).astype(q.dtype)[:, None]
    p_gen = ad.mul(ad.clip_max(gate, p_gen_max), Tensor(row_any))
    return p_ptr, p_gen
