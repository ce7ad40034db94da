"""Attention-based encoder-decoder ASR over synthetic features, with
pointer-generator biasing and a beam search that records prefix-tree
traversals for sub-tree extraction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kb import PrefixTree, TreeCursor, cursor_for
from .layers import BiLstm, Embedding, Linear, Lstm, Module, TreeGcn
from .lm import SlotPredictor
from .tcpgen import P_GEN_MAX, PointerHead, Shortlist, TreeBatch, pointer_rows, shortlist_predict
from .tokenizer import Vocabulary

LOG_EPS = 1e-12


class AsrModel(Module):
    """Two-layer bidirectional encoder, LSTM decoder, content attention.

    The decoder LSTM consumes token embeddings only; attention over the
    encoder states is computed from the current decoder state, and the output
    projection sees [state; context].  This keeps the teacher-forced pass a
    fixed op graph (no per-step feedback), which the training loop exploits.
    """

    def __init__(self, rng, vocab_size: int, d_feat: int = 16, d_emb: int = 64,
                 d_enc: int = 64, d_dec: int = 64, dtype=np.float64):
        if d_enc % 2:
            raise ValueError("d_enc must be even (bidirectional halves)")
        self.embed = Embedding(rng, vocab_size, d_emb, dtype=dtype)
        self.enc1 = BiLstm(rng, d_feat, d_enc // 2, dtype=dtype)
        self.enc2 = BiLstm(rng, d_enc, d_enc // 2, dtype=dtype)
        self.dec = Lstm(rng, d_emb, d_dec, dtype=dtype)
        self.att_query = Linear(rng, d_dec, d_enc, dtype=dtype)
        self.out = Linear(rng, d_dec + d_enc, vocab_size, dtype=dtype)
        self.d_enc = d_enc
        self.d_dec = d_dec

    def encode(self, feats: np.ndarray) -> Tensor:
        return self.enc2(self.enc1(Tensor(feats)))

    def raw_encode(self, feats: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.encode(feats).data


@dataclass
class PointerSide:
    """Everything the ASR-side pointer generator needs for one utterance."""

    head: PointerHead
    gcn: TreeGcn
    trees: list[PrefixTree]

    def tree_batch(self, embed: Embedding, vocab_size: int) -> TreeBatch | None:
        trees = [t for t in self.trees if len(t) > 1]
        if not trees:
            return None
        encodings = [self.gcn.encode(t, embed) for t in trees]
        return TreeBatch.build(trees, encodings, vocab_size)


@dataclass
class TeacherForced:
    loss: Tensor
    h_dec: Tensor          # (n, d_dec) state after consuming each reference token
    p_gen: Tensor          # (n,)  gate value at the step predicting each token
    p_rows: Tensor         # (n+1, V) interpolated distribution per step
    targets: np.ndarray


def teacher_forced_pass(
    model: AsrModel,
    feats: np.ndarray,
    ref_ids: Sequence[int],
    vocab: Vocabulary,
    pointer: PointerSide | None = None,
    p_gen_max: float = P_GEN_MAX,
) -> TeacherForced:
    """Run the decoder over the reference sequence with the interpolated
    output distribution; mean token NLL plus the per-step traces the value
    generator consumes."""
    if not ref_ids:
        raise ValueError("empty reference transcript")
    ref = list(ref_ids)
    n = len(ref)
    ids_in = np.array([vocab.bos_id] + ref, dtype=np.int64)
    targets = np.array(ref + [vocab.eos_id], dtype=np.int64)

    enc = model.encode(feats)
    emb = model.embed(ids_in)
    h = model.dec(emb)                                   # (n+1, d_dec)
    q = model.att_query(h)
    scale = 1.0 / float(np.sqrt(model.d_enc))
    att = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(enc)), scale))
    ctx = ad.matmul(att, enc)
    p_mdl = ad.softmax(model.out(ad.concat([h, ctx], axis=1)))

    batch = pointer.tree_batch(model.embed, len(vocab)) if pointer else None
    if batch is not None:
        mask = batch.step_masks(ref)
        queries_in = ad.concat([ctx, emb], axis=1)
        p_ptr, p_gen = pointer_rows(queries_in, h, batch, mask, pointer.head, p_gen_max)
        p_rows = ad.add(ad.mul(p_mdl, ad.add(ad.mul(p_gen, -1.0), 1.0)), ad.mul(p_ptr, p_gen))
        pg_vec = ad.reshape(p_gen, (n + 1,))
    else:
        p_rows = p_mdl
        pg_vec = Tensor(np.zeros(n + 1, dtype=feats.dtype))

    nll = ad.mul(ad.log(ad.take_cols(p_rows, targets), eps=LOG_EPS), -1.0)
    return TeacherForced(
        loss=ad.tmean(nll),
        h_dec=h[1 : n + 1],
        p_gen=pg_vec[0:n],
        p_rows=p_rows,
        targets=targets,
    )


# ------------------------------------------------------------- beam search

@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logp: float
    state: tuple[np.ndarray, np.ndarray]
    words: tuple[str, ...]
    partial: str
    cursors: dict[str, TreeCursor]
    shortlist: tuple[str, ...]
    pgen_trace: tuple[float, ...]
    h_trace: tuple[np.ndarray, ...]
    traversal: tuple[tuple[str, str], ...] = ()

    @property
    def norm_score(self) -> float:
        return self.logp / max(len(self.tokens), 1)


@dataclass
class NBestEntry:
    tokens: list[int]
    text: str
    log_score: float  # length-normalized (mean log-prob per emitted token)


@dataclass
class DecodeResult:
    utt_id: str
    nbest: list[NBestEntry]
    union_traversal: dict[str, set[str]]
    h_dec: np.ndarray          # (n, d_dec) along the 1-best
    p_gen: np.ndarray          # (n,)
    words: list[str]
    expanded: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def text(self) -> str:
        return self.nbest[0].text if self.nbest else ""


def beam_search(
    model: AsrModel,
    feats: np.ndarray,
    vocab: Vocabulary,
    *,
    pointer: PointerSide | None = None,
    trees_by_slot: dict[str, PrefixTree] | None = None,
    clm: SlotPredictor | None = None,
    shortlist_k: int = 2,
    beam: int = 8,
    nbest: int | None = None,
    max_len: int | None = None,
    p_gen_max: float = P_GEN_MAX,
    utt_id: str = "",
    collect_expanded: bool = False,
) -> DecodeResult:
    """Length-normalized beam search over the interpolated distribution.

    Prefix-tree cursors are tracked for every slot on every hypothesis (the
    CLM shortlist only gates which trees contribute to the biasing
    distribution), and entity completions are recorded into the union
    traversal for every candidate prefix created, pruned or not.
    """
    V = len(vocab)
    if max_len is None:
        max_len = feats.shape[0] // 2 + 6
    enc = model.raw_encode(feats)
    scale_att = 1.0 / float(np.sqrt(model.d_enc))
    trees_by_slot = trees_by_slot or {}
    slot_order = list(trees_by_slot)
    use_pointer = pointer is not None and any(len(t) > 1 for t in trees_by_slot.values())
    if use_pointer:
        for tree in trees_by_slot.values():
            if tree.encodings is None:
                tree.encodings = pointer.gcn.raw_encode(tree, model.embed)
    scale_ptr = 1.0 / float(np.sqrt(pointer.gcn.w1.data.shape[1])) if use_pointer else 1.0

    clm_cache: dict[tuple[str, ...], tuple[str, ...]] = {}

    def shortlist_for(words: tuple[str, ...]) -> tuple[str, ...]:
        if clm is None or len(slot_order) <= shortlist_k:
            return tuple(slot_order)
        hit = clm_cache.get(words)
        if hit is None:
            hit = tuple(shortlist_predict(clm, list(words), k=shortlist_k).slots)
            clm_cache[words] = hit
        return hit

    def initial_hyp() -> Hypothesis:
        x = model.embed.raw([vocab.bos_id])[0]
        _, state = model.dec.step(x, model.dec.zero_state())
        return Hypothesis(
            tokens=(), logp=0.0, state=state, words=(), partial="",
            cursors={s: cursor_for(t) for s, t in trees_by_slot.items()},
            shortlist=shortlist_for(()), pgen_trace=(), h_trace=(),
        )

    live = [initial_hyp()]
    finished: list[Hypothesis] = []
    union: dict[str, set[str]] = {s: set() for s in slot_order}
    expanded: list[tuple[int, ...]] = []

    # pad/none/bos never enter hypotheses (the decoder may assign them mass,
    # which stays in the distribution, but candidates skip them)
    banned = np.array([vocab.bos_id, vocab.pad_id, vocab.none_id])

    def valid_entries(hyp: Hypothesis) -> list[tuple[np.ndarray, int]]:
        entries: list[tuple[np.ndarray, int]] = []
        for slot in hyp.shortlist:
            tree = trees_by_slot.get(slot)
            if tree is None or len(tree) <= 1:
                continue
            cur = hyp.cursors[slot]
            node = cur.active[0] if cur.active else 0
            for tok, child in sorted(tree.children[node].items()):
                entries.append((tree.encodings[child], tok))
        return entries

    for _ in range(max_len):
        if not live:
            break
        candidates: list[tuple[float, int, int, float]] = []  # (score, hyp_idx, token, pg)
        for hi, hyp in enumerate(live):
            hvec = hyp.state[0]
            scores = enc @ model.att_query.raw(hvec) * scale_att
            alpha = ad.softmax_raw(scores)
            ctxv = alpha @ enc
            p_mdl = ad.softmax_raw(model.out.raw(np.concatenate([hvec, ctxv])))
            pg = 0.0
            p = p_mdl
            if use_pointer:
                entries = valid_entries(hyp)
                if not entries:
                    # no valid path on the shortlisted trees: re-query the CLM
                    # with the current decoded word history
                    hyp.shortlist = shortlist_for(hyp.words)
                    entries = valid_entries(hyp)
                if entries:
                    last_emb = model.embed.raw([hyp.tokens[-1] if hyp.tokens else vocab.bos_id])[0]
                    qp = pointer.head.query.raw(np.concatenate([ctxv, last_emb]))
                    keys = np.stack([k for k, _ in entries])
                    w = ad.softmax_raw(keys @ qp * scale_ptr)
                    attn = w @ keys
                    pg = min(float(ad.sigmoid_raw(
                        pointer.head.gate.raw(np.concatenate([hvec, attn]))[0])), p_gen_max)
                    p_ptr = np.zeros(V, dtype=p_mdl.dtype)
                    for wi, (_, tok) in zip(w, entries):
                        p_ptr[tok] += wi
                    p = p_mdl * (1.0 - pg) + p_ptr * pg
            logp_tok = np.log(p + LOG_EPS)
            selectable = logp_tok.copy()
            selectable[banned] = -np.inf
            top = np.argsort(-selectable, kind="stable")[:beam]
            for tok in top:
                if np.isfinite(selectable[tok]):
                    candidates.append((hyp.logp + float(logp_tok[tok]), hi, int(tok), pg))

        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        pool = candidates[: max(beam, 1) * 2]
        # every created candidate contributes completions at its creation step
        for score, hi, tok, _ in pool:
            hyp = live[hi]
            for slot, cur in hyp.cursors.items():
                for s, e in cur.peek_completions(tok):
                    union[s].add(e)
            if collect_expanded:
                expanded.append(hyp.tokens + (tok,))

        new_live: list[Hypothesis] = []
        for score, hi, tok, pg in pool:
            if len(new_live) >= beam:
                break
            hyp = live[hi]
            if tok == vocab.eos_id:
                finished.append(Hypothesis(
                    tokens=hyp.tokens + (tok,), logp=score, state=hyp.state,
                    words=hyp.words, partial=hyp.partial, cursors=hyp.cursors,
                    shortlist=hyp.shortlist, pgen_trace=hyp.pgen_trace + (pg,),
                    h_trace=hyp.h_trace, traversal=hyp.traversal))
                continue
            cursors = {}
            traversal = hyp.traversal
            for slot, cur in hyp.cursors.items():
                cur2, res = cur.advance(tok)
                cursors[slot] = cur2
                traversal = traversal + res.completed
            tok_str = vocab.token(tok)
            words, partial = hyp.words, hyp.partial
            if not vocab.is_special(tok):
                if vocab.is_word_end(tok):
                    words = words + (partial + tok_str[:-1],)
                    partial = ""
                else:
                    partial = partial + tok_str
            x = model.embed.raw([tok])[0]
            hvec, state = model.dec.step(x, hyp.state)
            shortlist = hyp.shortlist
            if len(words) != len(hyp.words):
                shortlist = shortlist_for(words)
            new_live.append(Hypothesis(
                tokens=hyp.tokens + (tok,), logp=score, state=state, words=words,
                partial=partial, cursors=cursors, shortlist=shortlist,
                pgen_trace=hyp.pgen_trace + (pg,), h_trace=hyp.h_trace + (hvec,),
                traversal=traversal))
        live = new_live

    ranked = sorted(finished if finished else live, key=lambda h: -h.norm_score)
    n_keep = min(len(ranked), nbest if nbest is not None else beam)
    entries = []
    for hyp in ranked[:n_keep]:
        content = [t for t in hyp.tokens if not vocab.is_special(t)]
        entries.append(NBestEntry(tokens=list(hyp.tokens), text=vocab.decode(content),
                                  log_score=hyp.norm_score))
    best = ranked[0] if ranked else initial_hyp()
    n_content = len([t for t in best.tokens if not vocab.is_special(t)])
    h_dec = (np.stack(best.h_trace[:n_content])
             if n_content else np.zeros((0, model.d_dec), dtype=feats.dtype))
    p_gen = np.array(best.pgen_trace[:n_content], dtype=feats.dtype)
    return DecodeResult(
        utt_id=utt_id, nbest=entries, union_traversal=union,
        h_dec=h_dec, p_gen=p_gen,
        words=list(best.words) + ([best.partial] if best.partial else []),
        expanded=expanded,
    )


# --------------------------------------------------------------------- WER

def edit_counts(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a minimal edit alignment."""
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j - 1] + cost, dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), d, ins


def wer(ref: str, hyp: str) -> float:
    """Word-level (S+D+I)/N; +inf when the reference is empty but hyp is not."""
    rw, hw = ref.split(), hyp.split()
    s, d, i = edit_counts(rw, hw)
    if not rw:
        return 0.0 if not hw else float("inf")
    return (s + d + i) / len(rw)


def corpus_wer(pairs: Sequence[tuple[str, str]]) -> float:
    """Aggregate edit counts over the corpus before dividing."""
    errors = 0
    total = 0
    for ref, hyp in pairs:
        rw, hw = ref.split(), hyp.split()
        s, d, i = edit_counts(rw, hw)
        errors += s + d + i
        total += len(rw)
    if total == 0:
        return 0.0 if errors == 0 else float("inf")
    return errors / total
