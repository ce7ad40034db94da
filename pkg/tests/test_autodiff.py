import numpy as np
import pytest

from slotgen import autodiff as ad
from slotgen.autodiff import Tensor
from slotgen.layers import Adam, DivergenceError, Lstm, attention, grad_check, uniform_init


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def fd_check(loss_fn, tensors, eps=1e-6, tol=1e-6):
    """Central-difference check over every coordinate of the given leaves."""
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        for idx in range(t.data.size):
            orig = t.data.flat[idx]
            t.data.flat[idx] = orig + eps
            with ad.no_grad():
                up = loss_fn().item()
            t.data.flat[idx] = orig - eps
            with ad.no_grad():
                down = loss_fn().item()
            t.data.flat[idx] = orig
            num = (up - down) / (2 * eps)
            assert abs(analytic.flat[idx] - num) <= tol * max(1.0, abs(num)), (
                f"coord {idx}: analytic {analytic.flat[idx]} vs numeric {num}"
            )


def test_add_mul_broadcast():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 3, 4), leaf(rng, 1, 4)
    fd_check(lambda: ad.tsum(ad.mul(ad.add(a, b), b)), [a, b])


def test_matmul_and_activations():
    rng = np.random.default_rng(1)
    a, w = leaf(rng, 3, 5), leaf(rng, 5, 2)
    fd_check(lambda: ad.tsum(ad.tanh(ad.matmul(a, w))), [a, w])
    fd_check(lambda: ad.tsum(ad.sigmoid(ad.matmul(a, w))), [a, w])
    fd_check(lambda: ad.tsum(ad.relu(ad.matmul(a, w))), [a, w], tol=1e-5)


def test_softmax_grad():
    rng = np.random.default_rng(2)
    x = leaf(rng, 4, 6)
    w = Tensor(rng.standard_normal((4, 6)))
    fd_check(lambda: ad.tsum(ad.mul(ad.softmax(x), w)), [x])


def test_masked_softmax_masks_exactly():
    rng = np.random.default_rng(3)
    x = leaf(rng, 3, 5)
    mask = np.array(
        [[True, False, True, False, True], [False] * 5, [True] * 5]
    )
    p = ad.masked_softmax(x, mask)
    assert np.all(p.data[~mask] == 0.0)
    assert np.allclose(p.data[0].sum(), 1.0)
    assert np.all(p.data[1] == 0.0)
    w = Tensor(rng.standard_normal((3, 5)))
    fd_check(lambda: ad.tsum(ad.mul(ad.masked_softmax(x, mask), w)), [x])


def test_cross_entropy_rows():
    rng = np.random.default_rng(4)
    x = leaf(rng, 5, 7)
    targets = np.array([0, 3, 6, 2, 2])
    ref = -np.log(ad.softmax_raw(x.data)[np.arange(5), targets])
    out = ad.cross_entropy_rows(x, targets)
    assert np.allclose(out.data, ref)
    fd_check(lambda: ad.tmean(ad.cross_entropy_rows(x, targets)), [x])


def test_gather_take_concat_getitem():
    rng = np.random.default_rng(5)
    e = leaf(rng, 6, 3)
    ids = np.array([0, 2, 2, 5])
    p = leaf(rng, 4, 3)

    def loss():
        g = ad.gather_rows(e, ids)
        c = ad.concat([g, p], axis=1)
        sl = c[1:3]
        return ad.tsum(ad.mul(sl, sl)) + ad.tsum(ad.take_cols(ad.softmax(p), np.array([0, 1, 2, 0])))

    fd_check(loss, [e, p])


def test_clip_max():
    x = Tensor(np.array([0.1, 0.5, 0.95]), requires_grad=True)
    y = ad.clip_max(x, 0.9)
    assert np.allclose(y.data, [0.1, 0.5, 0.9])
    ad.tsum(y).backward()
    assert np.allclose(x.grad, [1.0, 1.0, 0.0])


@pytest.mark.parametrize("reverse", [False, True])
@pytest.mark.parametrize("T", [1, 4])
def test_lstm_sequence_grad(reverse, T):
    rng = np.random.default_rng(6)
    x = leaf(rng, T, 3)
    cell = Lstm(rng, 3, 4)
    w = Tensor(rng.standard_normal((T, 4)))
    tensors = [x, cell.wx, cell.wh, cell.b]
    fd_check(lambda: ad.tsum(ad.mul(cell(x, reverse=reverse), w)), tensors, tol=1e-5)


def test_lstm_sequence_matches_step():
    rng = np.random.default_rng(7)
    cell = Lstm(rng, 3, 5)
    x = rng.standard_normal((6, 3))
    seq = cell(Tensor(x)).data
    state = cell.zero_state()
    for t in range(6):
        h, state = cell.step(x[t], state)
        assert np.allclose(h, seq[t], atol=1e-12)


def test_lstm_reverse_direction_order():
    rng = np.random.default_rng(8)
    cell = Lstm(rng, 2, 3)
    x = rng.standard_normal((4, 2))
    rev = cell(Tensor(x), reverse=True).data
    # manual reverse scan
    state = cell.zero_state()
    outs = {}
    for t in [3, 2, 1, 0]:
        h, state = cell.step(x[t], state)
        outs[t] = h
    for t in range(4):
        assert np.allclose(rev[t], outs[t], atol=1e-12)


def test_attention_single_unmasked_key():
    rng = np.random.default_rng(9)
    q = Tensor(rng.standard_normal(4))
    keys = Tensor(rng.standard_normal((3, 4)))
    vals = Tensor(rng.standard_normal((3, 4)))
    w, ctx, empty = attention(q, keys, vals, np.array([False, True, False]))
    assert not empty
    assert np.allclose(w.data, [0.0, 1.0, 0.0])
    assert np.allclose(ctx.data, vals.data[1])


def test_attention_identical_keys_split_evenly():
    rng = np.random.default_rng(10)
    k = rng.standard_normal(4)
    keys = Tensor(np.stack([k, k]))
    vals = Tensor(rng.standard_normal((2, 4)))
    q = Tensor(rng.standard_normal(4))
    w, ctx, empty = attention(q, keys, vals)
    assert np.allclose(w.data, [0.5, 0.5])


def test_attention_all_masked():
    rng = np.random.default_rng(11)
    q = Tensor(rng.standard_normal(4))
    keys = Tensor(rng.standard_normal((3, 4)))
    w, ctx, empty = attention(q, keys, keys, np.zeros(3, dtype=bool))
    assert empty
    assert np.all(w.data == 0.0) and np.all(ctx.data == 0.0)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        attention(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))


def test_attention_probabilities_sum_to_one():
    rng = np.random.default_rng(12)
    for _ in range(20):
        n = int(rng.integers(1, 8))
        q = Tensor(rng.standard_normal(6))
        keys = Tensor(rng.standard_normal((n, 6)))
        mask = rng.random(n) < 0.7
        w, _, empty = attention(q, keys, keys, mask)
        if empty:
            assert np.all(w.data == 0)
        else:
            assert abs(w.data.sum() - 1.0) < 1e-6


def test_grad_check_quadratic():
    rng = np.random.default_rng(13)
    p = uniform_init(rng, 5, 3)
    target = rng.standard_normal((5, 3))

    def loss():
        d = p - Tensor(target)
        return ad.tsum(ad.mul(d, d))

    assert grad_check(loss, {"p": p}, rng=rng) < 1e-7


def test_grad_check_zero_parameter_model():
    assert grad_check(lambda: Tensor(np.float64(1.0)), {}, rng=np.random.default_rng(0)) == 0.0


def test_adam_divergence_detection():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-3)
    p.grad = np.array([np.nan])
    with pytest.raises(DivergenceError):
        opt.step()


def test_adam_optimizes_quadratic():
    rng = np.random.default_rng(14)
    p = uniform_init(rng, 4)
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        loss = ad.tsum(ad.mul(p - Tensor(np.ones(4)), p - Tensor(np.ones(4))))
        loss.backward()
        opt.step()
    assert np.allclose(p.data, 1.0, atol=1e-2)


def test_no_grad_builds_no_graph():
    p = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.tsum(ad.mul(p, p))
    assert out._bw is None and not out.requires_grad
