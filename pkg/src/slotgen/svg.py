"""Audio-grounded, knowledge-aware slot-value generator.

The generator LSTM consumes, per subword position, a concatenation of
[audio channel; word-LM channel; copy-gate channel]:

* context region: decoder state after the subword, the word-LM state at
  word-end positions (zeros elsewhere), and the ASR-side generation
  probability for that subword;
* prompt and value regions: the embedding of the preceding wordpiece, the
  word-LM state when the preceding wordpiece ended a word, and zero.

Prompted with "the <slot> is", it generates the value in the shared subword
vocabulary, or the None token for slots not present.  A second pointer
generator over beam-search sub-trees can bias every output step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kb import KnowledgeBase, PrefixTree, cursor_for
from .layers import Embedding, Linear, Lstm, Module, TreeGcn
from .lm import LmStream, WordLm
from .tcpgen import P_GEN_MAX, PointerHead, TreeBatch, pointer_rows
from .tokenizer import Vocabulary

LOG_EPS = 1e-12
NONE_VALUE = "None"


class SvgModel(Module):
    def __init__(self, rng, vocab_size: int, d_dec: int = 64, d_plm: int = 64,
                 d_hidden: int = 64, dtype=np.float64):
        self.embed = Embedding(rng, vocab_size, d_dec, dtype=dtype)
        self.lstm = Lstm(rng, d_dec + d_plm + 1, d_hidden, dtype=dtype)
        self.out = Linear(rng, d_hidden, vocab_size, dtype=dtype)
        self.d_dec = d_dec
        self.d_plm = d_plm
        self.d_hidden = d_hidden


def prompt_text(slot: str) -> str:
    return f"the {slot.replace('_', ' ')} is"


def prompt_ids(slot: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode_text(prompt_text(slot))


@dataclass
class AlignedContext:
    """Per-position channels for the decoded/reference context region."""

    token_ids: list[int]
    audio: Tensor | np.ndarray        # (n, d_dec) decoder states (or embeddings)
    plm: Tensor | np.ndarray          # (n, d_plm) zero except at word ends
    p_gen: Tensor | np.ndarray        # (n, 1)
    words: list[str]


def _word_end_rows(token_ids: Sequence[int], vocab: Vocabulary) -> list[int | None]:
    """Index of the word completed at each word-end position, else None."""
    rows: list[int | None] = []
    count = 0
    for tid in token_ids:
        if vocab.is_word_end(tid):
            rows.append(count)
            count += 1
        else:
            rows.append(None)
    return rows


def align(
    context_ids: Sequence[int],
    h_dec: Tensor | np.ndarray,
    p_gen: Tensor | np.ndarray,
    plm_states: Tensor | np.ndarray,
    vocab: Vocabulary,
) -> AlignedContext:
    """Attach word-LM states at word-end subword positions.

    plm_states must hold one vector per context word (state after consuming
    that word); every other position gets a zero vector.
    """
    n = len(context_ids)
    if _shape0(h_dec) != n or _shape0(p_gen) != n:
        raise ValueError("context channels disagree with the token count")
    rows = _word_end_rows(context_ids, vocab)
    n_words = sum(r is not None for r in rows)
    if _shape0(plm_states) != n_words:
        raise ValueError(
            f"word count mismatch: {n_words} word ends vs {_shape0(plm_states)} LM states")
    d_plm = plm_states.shape[1] if plm_states.ndim == 2 else 0
    scatter = np.zeros((n, n_words))
    for pos, row in enumerate(rows):
        if row is not None:
            scatter[pos, row] = 1.0
    if isinstance(plm_states, Tensor):
        plm_channel = ad.matmul(Tensor(scatter.astype(plm_states.dtype)), plm_states)
        pg = ad.reshape(p_gen, (n, 1)) if isinstance(p_gen, Tensor) else Tensor(
            np.asarray(p_gen).reshape(n, 1))
    else:
        plm_channel = scatter @ plm_states if n_words else np.zeros((n, d_plm))
        pg = np.asarray(p_gen).reshape(n, 1)
    words = []
    word = ""
    for tid in context_ids:
        tok = vocab.token(tid)
        if vocab.is_word_end(tid):
            words.append(word + tok[:-1])
            word = ""
        elif not vocab.is_special(tid):
            word += tok
    return AlignedContext(token_ids=list(context_ids), audio=h_dec,
                          plm=plm_channel, p_gen=pg, words=words)


def _shape0(x) -> int:
    return x.shape[0] if hasattr(x, "shape") else len(x)


# -------------------------------------------------------------- training

@dataclass
class PromptTask:
    """One teacher-forced prompt: slot, target token ids, optional sub-tree."""

    slot: str
    targets: list[int]      # value tokens + eos, or [none, eos]
    subtree: PrefixTree | None = None


def svg_teacher_loss(
    svg: SvgModel,
    plm: WordLm,
    aligned: AlignedContext,
    tasks: Sequence[PromptTask],
    vocab: Vocabulary,
    *,
    pointer_head: PointerHead | None = None,
    gcn: TreeGcn | None = None,
    asr_embed: Embedding | None = None,
    history: Sequence[str] = (),
    p_gen_max: float = P_GEN_MAX,
) -> tuple[Tensor, int]:
    """Mean token NLL over all prompts of one utterance; (loss, n_tokens).

    The word-LM runs once over context + prompt + value words per prompt (the
    history, for multi-turn, is prefixed).  Pointer biasing applies on value
    steps when a task carries a sub-tree and the pointer pieces are given.
    """
    n_ctx = len(aligned.token_ids)
    nlls = []
    total = 0
    dtype = svg.out.w.data.dtype
    for task in tasks:
        p_ids = prompt_ids(task.slot, vocab)
        tokens_all = aligned.token_ids + p_ids + task.targets
        tail = len(p_ids) + len(task.targets)
        prev = [aligned.token_ids[-1], *p_ids, *task.targets[:-1]]
        audio_tail = svg.embed(np.array(prev, dtype=np.int64))

        words_all = _spelled_words(tokens_all, vocab)
        plm_states = plm.states(words_all, history=history)
        flags = [vocab.is_word_end(t) for t in tokens_all]
        cum = np.cumsum(flags)
        scatter = np.zeros((tail, len(words_all)))
        for i in range(n_ctx, len(tokens_all)):
            if flags[i - 1]:
                scatter[i - n_ctx, cum[i - 1] - 1] = 1.0
        plm_tail = ad.matmul(Tensor(scatter.astype(dtype)), plm_states)

        zeros_pg = Tensor(np.zeros((tail, 1), dtype=dtype))
        x_tail = ad.concat([audio_tail, plm_tail, zeros_pg], axis=1)
        x_ctx = ad.concat([aligned.audio, aligned.plm, aligned.p_gen], axis=1)
        h = svg.lstm(ad.concat([x_ctx, x_tail], axis=0))
        h_val = h[n_ctx + len(p_ids):]
        logits = svg.out(h_val)
        p_mdl = ad.softmax(logits)

        targets = np.array(task.targets, dtype=np.int64)
        if (task.subtree is not None and len(task.subtree) > 1
                and pointer_head is not None and gcn is not None):
            enc = gcn.encode(task.subtree, asr_embed if asr_embed is not None else svg.embed)
            batch = TreeBatch.build([task.subtree], [enc], len(vocab))
            mask = batch.step_masks(task.targets[:-1])
            p_ptr, pg = pointer_rows(h_val, h_val, batch, mask, pointer_head, p_gen_max)
            p_rows = ad.add(ad.mul(p_mdl, ad.add(ad.mul(pg, -1.0), 1.0)), ad.mul(p_ptr, pg))
        else:
            p_rows = p_mdl
        nll = ad.mul(ad.log(ad.take_cols(p_rows, targets), eps=LOG_EPS), -1.0)
        nlls.append(nll)
        total += len(targets)
    if not nlls:
        return Tensor(np.asarray(0.0, dtype=dtype)), 0
    return ad.tmean(ad.concat(nlls, axis=0)), total


def _spelled_words(token_ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    words = []
    word = ""
    for tid in token_ids:
        if vocab.is_special(tid):
            continue
        tok = vocab.token(tid)
        if vocab.is_word_end(tid):
            words.append(word + tok[:-1])
            word = ""
        else:
            word += tok
    return words


# ------------------------------------------------------------- generation

@dataclass
class GenState:
    state: tuple[np.ndarray, np.ndarray]
    prev_tok: int
    pending_plm: np.ndarray | None
    stream: LmStream
    partial: str


def _feed(svg: SvgModel, gs: GenState, audio_vec: np.ndarray, plm_vec: np.ndarray,
          pg: float) -> np.ndarray:
    x = np.concatenate([audio_vec, plm_vec, np.array([pg], dtype=audio_vec.dtype)])
    h, gs.state = svg.lstm.step(x, gs.state)
    return h


def generate_value(
    svg: SvgModel,
    plm: WordLm,
    aligned: AlignedContext,
    slot: str,
    vocab: Vocabulary,
    *,
    subtree: PrefixTree | None = None,
    pointer_head: PointerHead | None = None,
    history: Sequence[str] = (),
    max_len: int = 20,
    p_gen_force: float | None = None,
    p_gen_max: float = P_GEN_MAX,
    beam: int = 1,
) -> str:
    """Greedy (default) generation of one slot's value, possibly "None".

    With p_gen_force=1.0 (copy diagnostic) every step follows the pointer
    distribution and generation stops once an entity path completes.
    """
    if beam > 1:
        return _generate_beam(svg, plm, aligned, slot, vocab, subtree=subtree,
                              pointer_head=pointer_head, history=history,
                              max_len=max_len, p_gen_force=p_gen_force,
                              p_gen_max=p_gen_max, beam=beam)
    gs = _consume_context_and_prompt(svg, plm, aligned, slot, vocab, history)
    dtype = svg.out.w.data.dtype
    zeros_plm = np.zeros(svg.d_plm, dtype=dtype)
    use_ptr = subtree is not None and len(subtree) > 1 and pointer_head is not None
    cursor = cursor_for(subtree) if use_ptr else None
    out_tokens: list[int] = []
    for step_i in range(max_len):
        audio = svg.embed.raw([gs.prev_tok])[0]
        plm_vec = gs.pending_plm if gs.pending_plm is not None else zeros_plm
        h = _feed(svg, gs, audio, plm_vec, 0.0)
        p = ad.softmax_raw(svg.out.raw(h))
        if use_ptr:
            p, _ = _pointer_mix(p, h, cursor, subtree, pointer_head,
                                p_gen_force, p_gen_max, len(vocab))
        tok = int(np.argmax(p))
        if tok == vocab.eos_id:
            break
        if tok == vocab.none_id:
            return NONE_VALUE if step_i == 0 else vocab.decode(out_tokens)
        out_tokens.append(tok)
        gs.prev_tok = tok
        gs.pending_plm = None
        completed = False
        if use_ptr:
            cursor, res = cursor.advance(tok)
            completed = bool(res.completed)
        if not vocab.is_special(tok):
            tok_str = vocab.token(tok)
            if vocab.is_word_end(tok):
                gs.pending_plm = gs.stream.advance(gs.partial + tok_str[:-1])
                gs.partial = ""
            else:
                gs.partial += tok_str
        if p_gen_force is not None and p_gen_force >= 1.0 and completed:
            break
    return vocab.decode(out_tokens)


def _consume_context_and_prompt(svg, plm, aligned, slot, vocab, history) -> GenState:
    dtype = svg.out.w.data.dtype
    audio = aligned.audio.data if isinstance(aligned.audio, Tensor) else np.asarray(aligned.audio)
    plm_ch = aligned.plm.data if isinstance(aligned.plm, Tensor) else np.asarray(aligned.plm)
    pg_ch = aligned.p_gen.data if isinstance(aligned.p_gen, Tensor) else np.asarray(aligned.p_gen)
    stream = plm.stream(history)
    gs = GenState(state=svg.lstm.zero_state(), prev_tok=0,
                  pending_plm=None, stream=stream, partial="")
    # context region: channels as aligned; advance the LM stream word by word
    wi = 0
    for pos, tid in enumerate(aligned.token_ids):
        if vocab.is_word_end(tid):
            stream.advance(aligned.words[wi])
            wi += 1
        _feed(svg, gs, audio[pos].astype(dtype), plm_ch[pos].astype(dtype),
              float(pg_ch[pos, 0]))
    gs.prev_tok = aligned.token_ids[-1] if aligned.token_ids else 0
    gs.pending_plm = (stream.h if aligned.token_ids
                      and vocab.is_word_end(aligned.token_ids[-1]) else None)
    # prompt region: preceding-wordpiece embeddings in the audio channel
    zeros_plm = np.zeros(svg.d_plm, dtype=dtype)
    partial = ""
    for tid in prompt_ids(slot, vocab):
        audio_vec = svg.embed.raw([gs.prev_tok])[0]
        plm_vec = gs.pending_plm if gs.pending_plm is not None else zeros_plm
        _feed(svg, gs, audio_vec, plm_vec, 0.0)
        gs.prev_tok = tid
        gs.pending_plm = None
        tok_str = vocab.token(tid)
        if vocab.is_word_end(tid):
            gs.pending_plm = stream.advance(partial + tok_str[:-1])
            partial = ""
        else:
            partial += tok_str
    gs.partial = ""
    return gs


def _pointer_mix(p_mdl, h, cursor, subtree, head, p_gen_force, p_gen_max, vocab_size):
    node = cursor.active[0] if cursor.active else 0
    kids = sorted(subtree.children[node].items())
    if not kids:
        return p_mdl, 0.0
    keys = np.stack([subtree.encodings[c] for _, c in kids])
    q = head.query.raw(h)
    w = ad.softmax_raw(keys @ q / np.sqrt(keys.shape[1]))
    attn = w @ keys
    if p_gen_force is not None:
        pg = float(p_gen_force)
    else:
        pg = min(float(ad.sigmoid_raw(head.gate.raw(np.concatenate([h, attn]))[0])), p_gen_max)
    p_ptr = np.zeros(vocab_size, dtype=p_mdl.dtype)
    for wi, (tok, _) in zip(w, kids):
        p_ptr[tok] += wi
    if pg == 0.0:
        return p_mdl, 0.0
    if pg == 1.0:
        return p_ptr, 1.0
    return p_mdl * (1.0 - pg) + p_ptr * pg, pg


def _generate_beam(svg, plm, aligned, slot, vocab, *, subtree, pointer_head,
                   history, max_len, p_gen_force, p_gen_max, beam) -> str:
    base = _consume_context_and_prompt(svg, plm, aligned, slot, vocab, history)
    dtype = svg.out.w.data.dtype
    zeros_plm = np.zeros(svg.d_plm, dtype=dtype)
    use_ptr = subtree is not None and len(subtree) > 1 and pointer_head is not None

    @dataclass
    class Hyp:
        gs: GenState
        tokens: tuple[int, ...]
        logp: float
        cursor: object
        done: bool = False

        @property
        def score(self):
            return self.logp / max(len(self.tokens) + 1, 1)

    live = [Hyp(gs=base, tokens=(), logp=0.0,
                cursor=cursor_for(subtree) if use_ptr else None)]
    finished: list[Hyp] = []
    for step_i in range(max_len):
        if not live:
            break
        cands = []
        for hyp in live:
            audio = svg.embed.raw([hyp.gs.prev_tok])[0]
            plm_vec = hyp.gs.pending_plm if hyp.gs.pending_plm is not None else zeros_plm
            gs2 = GenState(state=hyp.gs.state, prev_tok=hyp.gs.prev_tok,
                           pending_plm=hyp.gs.pending_plm,
                           stream=hyp.gs.stream, partial=hyp.gs.partial)
            h = _feed(svg, gs2, audio, plm_vec, 0.0)
            p = ad.softmax_raw(svg.out.raw(h))
            if use_ptr:
                p, _ = _pointer_mix(p, h, hyp.cursor, subtree, pointer_head,
                                    p_gen_force, p_gen_max, len(vocab))
            logp = np.log(p + LOG_EPS)
            for tok in np.argsort(-logp, kind="stable")[:beam]:
                cands.append((hyp.logp + float(logp[tok]), hyp, gs2, h, int(tok)))
        cands.sort(key=lambda c: -c[0])
        live = []
        for score, hyp, gs2, h, tok in cands[: beam * 2]:
            if len(live) >= beam:
                break
            if tok in (vocab.eos_id, vocab.pad_id, vocab.bos_id):
                finished.append(Hyp(gs=gs2, tokens=hyp.tokens, logp=score, cursor=hyp.cursor,
                                    done=True))
                continue
            if tok == vocab.none_id:
                if step_i == 0:
                    finished.append(Hyp(gs=gs2, tokens=(), logp=score, cursor=hyp.cursor,
                                        done=True))
                continue
            stream = gs2.stream
            pending = None
            partial = gs2.partial
            tok_str = vocab.token(tok)
            if vocab.is_word_end(tok):
                stream = stream.copy()
                pending = stream.advance(partial + tok_str[:-1])
                partial = ""
            else:
                partial = partial + tok_str
            cursor = hyp.cursor
            completed = False
            if use_ptr:
                cursor, res = cursor.advance(tok)
                completed = bool(res.completed)
            nh = Hyp(gs=GenState(state=gs2.state, prev_tok=tok, pending_plm=pending,
                                 stream=stream, partial=partial),
                     tokens=hyp.tokens + (tok,), logp=score, cursor=cursor)
            if p_gen_force is not None and p_gen_force >= 1.0 and completed:
                finished.append(nh)
            else:
                live.append(nh)
            if len(live) >= beam:
                break
    pool = finished if finished else live
    if not pool:
        return NONE_VALUE
    best = max(pool, key=lambda h: h.score)
    return NONE_VALUE if not best.tokens and best.done else vocab.decode(list(best.tokens))


# ------------------------------------------------------------ slot filling

def fill_all_slots(
    svg: SvgModel,
    plm: WordLm,
    aligned: AlignedContext,
    kb: KnowledgeBase,
    vocab: Vocabulary,
    *,
    union_traversal: dict[str, set[str]] | None = None,
    pointer_head: PointerHead | None = None,
    gcn: TreeGcn | None = None,
    asr_embed: Embedding | None = None,
    history: Sequence[str] = (),
    beam: int = 1,
    max_len: int = 20,
) -> dict[str, str]:
    """Prompt every slot; keep the non-None outputs.

    Sub-trees are rebuilt per slot from the beam-search union traversal and
    encoded with the shared tree encoder.
    """
    from .kb import build_subtree

    if not aligned.token_ids:
        return {}
    out: dict[str, str] = {}
    for slot in kb.slots:
        subtree = None
        if union_traversal is not None and pointer_head is not None and gcn is not None:
            found = union_traversal.get(slot, set())
            if found:
                subtree = build_subtree(slot, found, vocab)
                subtree.encodings = gcn.raw_encode(
                    subtree, asr_embed if asr_embed is not None else svg.embed)
        value = generate_value(svg, plm, aligned, slot, vocab, subtree=subtree,
                               pointer_head=pointer_head, history=history,
                               beam=beam, max_len=max_len)
        if value != NONE_VALUE and value:
            out[slot] = value
    return out


def track_state(turn_predictions: Sequence[dict[str, str]],
                kb: KnowledgeBase) -> list[dict[str, str]]:
    """Cumulative dialogue state: later non-None values overwrite earlier,
    surface forms canonicalized through the KB alias table."""
    state: dict[str, str] = {}
    states = []
    for preds in turn_predictions:
        for slot, value in preds.items():
            if value and value != NONE_VALUE:
                state[slot] = kb.canonical(value)
        states.append(dict(state))
    return states
