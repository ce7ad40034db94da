"""Reverse-mode automatic differentiation over numpy arrays.

Small tape-based engine: each op returns a Tensor holding the result plus
closures that push gradients to its parents.  Recurrent networks go through
the fused ``lstm_sequence`` op (hand-derived backprop-through-time) so a
whole sequence costs a handful of graph nodes instead of one per step.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bw: Callable[[], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Backprop from a scalar; the graph is freed afterwards."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bw is not None:
                node._bw()
                node._bw = None
                node._parents = ()

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(parent: Tensor, grad: np.ndarray) -> None:
    parent.grad = grad if parent.grad is None else parent.grad + grad


def _make(data: np.ndarray, pairs: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Build the result tensor; pairs are (parent, fn(upstream)->parent grad)."""
    live = [(p, fn) for p, fn in pairs if p.requires_grad]
    if not _grad_enabled or not live:
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tuple(p for p, _ in live)

    def bw():
        g = out.grad
        for p, fn in live:
            _accumulate(p, fn(g))

    out._bw = bw
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, [(a, lambda g: g * out_data)])


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    shifted = a.data + eps if eps else a.data
    return _make(np.log(shifted), [(a, lambda g: g / shifted)])


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _make(out_data, [(a, lambda g: g * (1.0 - out_data * out_data))])


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_raw(a.data)
    return _make(out_data, [(a, lambda g: g * out_data * (1.0 - out_data))])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def clip_max(a: Tensor, cap: float) -> Tensor:
    """Elementwise min(a, cap); gradient passes where a <= cap."""
    mask = a.data <= cap
    return _make(np.minimum(a.data, cap), [(a, lambda g: g * mask)])


# shape / indexing --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data @ b.data,
        [
            (a, lambda g: g @ b.data.T),
            (b, lambda g: a.data.T @ g),
        ],
    )


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, [(a, lambda g: g.T)])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def slicer(i):
        def fn(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(idx)]

        return fn

    return _make(data, [(t, slicer(i)) for i, t in enumerate(tensors)])


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def getitem(a: Tensor, key) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return out

    return _make(a.data[key].copy(), [(a, bw)])


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows table[ids]; the embedding-lookup op."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return out

    return _make(table.data[ids], [(table, bw)])


def take_cols(probs: Tensor, ids: np.ndarray) -> Tensor:
    """out[i] = probs[i, ids[i]]."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(len(ids))

    def bw(g):
        out = np.zeros_like(probs.data)
        out[rows, ids] = g
        return out

    return _make(probs.data[rows, ids].copy(), [(probs, bw)])


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make(a.data.sum(axis=axis, keepdims=keepdims), [(a, bw)])


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / float(n))


# softmax family ----------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return out_data * (g - dot)

    return _make(out_data, [(a, bw)])


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over positions where mask is True.

    Masked positions get exactly 0.  Rows with no valid position come out as
    all zeros (the "empty" attention case); callers must gate on that.
    """
    mask = np.asarray(mask, dtype=bool)
    s = np.where(mask, scores.data, -np.inf)
    row_any = mask.any(axis=-1, keepdims=True)
    m = np.where(row_any, s.max(axis=-1, keepdims=True, initial=-np.inf), 0.0)
    e = np.where(mask, np.exp(s - m), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out_data = e / np.where(denom == 0.0, 1.0, denom)

    def bw(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return out_data * (g - dot)

    return _make(out_data, [(scores, bw)])


def cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row NLL of targets under softmax(logits); returns a vector."""
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    nll = -np.log(p[rows, targets])

    def bw(g):
        grad = p * g[:, None]
        grad[rows, targets] -= g
        return grad

    return _make(nll, [(logits, bw)])


# fused recurrence --------------------------------------------------------

def lstm_sequence(
    x: Tensor,
    wx: Tensor,
    wh: Tensor,
    b: Tensor,
    reverse: bool = False,
) -> Tensor:
    """Single-layer LSTM over a (T, D) input; returns hidden states (T, H).

    Output row t is the state after consuming input t regardless of scan
    direction.  Gate layout along the 4H axis is [input, forget, cell, output];
    initial state is zero.  The backward pass is hand-derived BPTT with the
    per-step work kept elementwise (weight-gradient matmuls are batched).
    """
    X, WX, WH, B = x.data, wx.data, wh.data, b.data
    T = X.shape[0]
    H = WH.shape[0]
    pre = X @ WX + B if T else np.zeros((0, 4 * H), dtype=X.dtype)
    order = range(T - 1, -1, -1) if reverse else range(T)
    I = np.empty((T, H), dtype=X.dtype)
    F = np.empty_like(I)
    G = np.empty_like(I)
    O = np.empty_like(I)
    C = np.empty_like(I)
    Hprev = np.empty_like(I)
    Cprev = np.empty_like(I)
    Hout = np.empty_like(I)
    h = np.zeros(H, dtype=X.dtype)
    c = np.zeros(H, dtype=X.dtype)
    for t in order:
        Hprev[t] = h
        Cprev[t] = c
        z = pre[t] + h @ WH
        i = _sigmoid_raw(z[:H])
        f = _sigmoid_raw(z[H : 2 * H])
        g = np.tanh(z[2 * H : 3 * H])
        o = _sigmoid_raw(z[3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        I[t], F[t], G[t], O[t], C[t], Hout[t] = i, f, g, o, c, h

    comp_order = list(order)

    def bw_all(gH: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        dZ = np.zeros((T, 4 * H), dtype=X.dtype)
        WHT = WH.T
        dh = np.zeros(H, dtype=X.dtype)
        dc = np.zeros(H, dtype=X.dtype)
        for t in reversed(comp_order):
            dh = dh + gH[t]
            tc = np.tanh(C[t])
            do = dh * tc
            dct = dc + dh * O[t] * (1.0 - tc * tc)
            di = dct * G[t]
            df = dct * Cprev[t]
            dg = dct * I[t]
            dZ[t, :H] = di * I[t] * (1.0 - I[t])
            dZ[t, H : 2 * H] = df * F[t] * (1.0 - F[t])
            dZ[t, 2 * H : 3 * H] = dg * (1.0 - G[t] * G[t])
            dZ[t, 3 * H :] = do * O[t] * (1.0 - O[t])
            dh = dZ[t] @ WHT
            dc = dct * F[t]
        dX = dZ @ WX.T
        dWX = X.T @ dZ
        dWH = Hprev.T @ dZ
        dB = dZ.sum(axis=0)
        return dX, dWX, dWH, dB

    cache: dict[str, np.ndarray] = {}

    def grad_for(name: str):
        def fn(g):
            if not cache:
                cache["dX"], cache["dWX"], cache["dWH"], cache["dB"] = bw_all(g)
            return cache[name]

        return fn

    return _make(
        Hout,
        [
            (x, grad_for("dX")),
            (wx, grad_for("dWX")),
            (wh, grad_for("dWH")),
            (b, grad_for("dB")),
        ],
    )


def lstm_step_raw(
    x: np.ndarray,
    h: np.ndarray,
    c: np.ndarray,
    WX: np.ndarray,
    WH: np.ndarray,
    B: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One inference-time LSTM step; arithmetic identical to lstm_sequence."""
    H = WH.shape[0]
    z = x @ WX + B + h @ WH
    i = _sigmoid_raw(z[:H])
    f = _sigmoid_raw(z[H : 2 * H])
    g = np.tanh(z[2 * H : 3 * H])
    o = _sigmoid_raw(z[3 * H :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def softmax_raw(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid_raw(x) -> np.ndarray:
    return _sigmoid_raw(np.asarray(x, dtype=np.float64))
