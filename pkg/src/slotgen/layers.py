"""Model building blocks: embeddings, LSTMs, attention, tree GCN, Adam.

All parameters are ``autodiff.Tensor`` leaves initialised uniformly in
[-0.1, 0.1] from the run seed.  Every block offers the graph-building call
used in training and a raw numpy path used during decoding; the two share
the same weight arrays and the same arithmetic.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_SCALE = 0.1


class DivergenceError(RuntimeError):
    """Raised when an optimizer step produces non-finite parameters."""


def uniform_init(rng: np.random.Generator, *shape: int, dtype=np.float64) -> Tensor:
    data = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal parameter container; children discovered by attribute scan."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


class Embedding(Module):
    def __init__(self, rng, n: int, dim: int, dtype=np.float64):
        self.weight = uniform_init(rng, n, dim, dtype=dtype)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.gather_rows(self.weight, ids)

    def raw(self, ids) -> np.ndarray:
        return self.weight.data[np.asarray(ids, dtype=np.int64)]


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float64):
        self.w = uniform_init(rng, d_in, d_out, dtype=dtype)
        self.b = uniform_init(rng, d_out, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def raw(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.data + self.b.data


class Lstm(Module):
    """Single-layer unidirectional LSTM (zero initial state)."""

    def __init__(self, rng, d_in: int, d_hidden: int, dtype=np.float64):
        self.wx = uniform_init(rng, d_in, 4 * d_hidden, dtype=dtype)
        self.wh = uniform_init(rng, d_hidden, 4 * d_hidden, dtype=dtype)
        self.b = uniform_init(rng, 4 * d_hidden, dtype=dtype)
        self.d_hidden = d_hidden

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        return ad.lstm_sequence(x, self.wx, self.wh, self.b, reverse=reverse)

    def zero_state(self) -> tuple[np.ndarray, np.ndarray]:
        dtype = self.wx.data.dtype
        return np.zeros(self.d_hidden, dtype=dtype), np.zeros(self.d_hidden, dtype=dtype)

    def step(self, x: np.ndarray, state: tuple[np.ndarray, np.ndarray]):
        h, c = ad.lstm_step_raw(x, state[0], state[1], self.wx.data, self.wh.data, self.b.data)
        return h, (h, c)


class BiLstm(Module):
    """Forward and backward LSTMs; outputs concatenated per position."""

    def __init__(self, rng, d_in: int, d_hidden_each: int, dtype=np.float64):
        self.fwd = Lstm(rng, d_in, d_hidden_each, dtype=dtype)
        self.bwd = Lstm(rng, d_in, d_hidden_each, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.concat([self.fwd(x), self.bwd(x, reverse=True)], axis=1)

    def raw(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self(Tensor(x)).data


def attention(
    query: Tensor,
    keys: Tensor,
    values: Tensor,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, bool]:
    """Scaled dot-product attention for a single query vector.

    Returns (weights over the N positions, context vector, empty flag).  With
    every position masked the weights are exactly zero, the context is the
    zero vector and empty is True.
    """
    query, keys, values = ad.as_tensor(query), ad.as_tensor(keys), ad.as_tensor(values)
    q = query if query.ndim == 2 else ad.reshape(query, (1, -1))
    if keys.shape[-1] != q.shape[-1] or keys.shape != values.shape:
        raise ValueError(
            f"attention shape mismatch: query {q.shape}, keys {keys.shape}, values {values.shape}"
        )
    n = keys.shape[0]
    if mask is None:
        mask = np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    empty = not bool(mask.any())
    scale = 1.0 / float(np.sqrt(q.shape[-1]))
    scores = ad.mul(ad.matmul(q, ad.transpose(keys)), scale)
    weights = ad.masked_softmax(scores, mask[None, :])
    context = ad.matmul(weights, values)
    return ad.reshape(weights, (n,)), ad.reshape(context, (-1,)), empty


class TreeGcn(Module):
    """Two-layer mean-aggregation tree encoder with child-to-parent messages.

    Node input features are the token embeddings of an external table (the
    ASR decoder embeddings); the root uses a learned vector.  Per layer:
    h' = relu(mean(h_self, h_children) @ W).
    """

    def __init__(self, rng, d_emb: int, d_hidden: int, dtype=np.float64):
        self.w1 = uniform_init(rng, d_emb, d_hidden, dtype=dtype)
        self.w2 = uniform_init(rng, d_hidden, d_hidden, dtype=dtype)
        self.root_vec = uniform_init(rng, 1, d_emb, dtype=dtype)

    def encode(self, tree, embedding: Embedding) -> Tensor:
        """Node encodings (n_nodes, d_hidden), row order = tree node ids."""
        agg = Tensor(tree.aggregation_matrix(dtype=self.w1.data.dtype))
        if len(tree) > 1:
            feats = ad.concat(
                [self.root_vec, embedding(np.asarray(tree.tokens[1:], dtype=np.int64))],
                axis=0,
            )
        else:
            feats = self.root_vec
        h = ad.relu(ad.matmul(ad.matmul(agg, feats), self.w1))
        h = ad.relu(ad.matmul(ad.matmul(agg, h), self.w2))
        return h

    def raw_encode(self, tree, embedding: Embedding) -> np.ndarray:
        with ad.no_grad():
            return self.encode(tree, embedding).data


class Adam:
    """Adam with fixed defaults lr=1e-3, betas=(0.9, 0.999), eps=1e-8.

    Parameters are checked for NaN/Inf after every step.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data = p.data - self.lr * update.astype(p.data.dtype, copy=False)
            if not np.isfinite(p.data).all():
                raise DivergenceError(f"non-finite values in parameter {k!r} after step {self.t}")


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    n_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Samples at least n_coords coordinates across all parameters (all of them
    for small models).  loss_fn must be deterministic.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    flat: list[tuple[str, int]] = []
    for k, p in params.items():
        flat.extend((k, i) for i in range(p.data.size))
    if len(flat) > n_coords:
        picks = rng.choice(len(flat), size=n_coords, replace=False)
        flat = [flat[i] for i in picks]

    worst = 0.0
    for name, idx in flat:
        p = params[name]
        orig = p.data.flat[idx]
        p.data.flat[idx] = orig + eps
        with ad.no_grad():
            up = loss_fn().item()
        p.data.flat[idx] = orig - eps
        with ad.no_grad():
            down = loss_fn().item()
        p.data.flat[idx] = orig
        numeric = (up - down) / (2.0 * eps)
        a = analytic[name].flat[idx]
        err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst
