import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from etclip import tensorcore as tc
from etclip.tensorcore import Tensor


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


# each case builds a scalar loss from float64 leaves
def _cases():
    def ce(rng):
        z = leaf(rng, 4, 5)
        return lambda: tc.cross_entropy(z, np.array([0, 3, 1, 4]), np.array([1.0, 0.0, 2.0, 1.0])), {"z": z}

    def layer_norm(rng):
        x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
        w = rng.normal(size=(3, 6))
        return lambda: tc.sum(tc.mul(tc.layer_norm(x, g, b), w)), {"x": x, "g": g, "b": b}

    def attention_like(rng):
        q, k = leaf(rng, 2, 3, 4), leaf(rng, 2, 3, 4)
        mask = tc.causal_mask(3)
        w = rng.normal(size=(2, 3, 3))

        def f():
            s = tc.masked_fill(tc.matmul(q, tc.transpose(k, (0, 2, 1))), mask, -1e9)
            return tc.sum(tc.mul(tc.softmax(s, -1), w))
        return f, {"q": q, "k": k}

    def broadcast(rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4)
        c = leaf(rng, 3, 1)
        return lambda: tc.sum(tc.mul(tc.sub(tc.add(a, b), c), tc.add(a, 1.0))), {"a": a, "b": b, "c": c}

    def unary(rng):
        x, y = leaf(rng, 5), leaf(rng, 5, positive=True)
        return (lambda: tc.sum(tc.add(tc.add(tc.exp(tc.scale(x, 0.3)), tc.sqrt(y)),
                                      tc.add(tc.gelu(x), tc.neg(tc.relu(tc.add(x, 0.05))))))), {"x": x, "y": y}

    def shapes(rng):
        x = leaf(rng, 2, 3, 4)
        w = rng.normal(size=(4, 6))

        def f():
            r = tc.reshape(x, (6, 4))
            c = tc.concat([r, tc.scale(r, 2.0)], axis=0)
            g = tc.getitem(c, (slice(1, 9), slice(None)))
            return tc.mean(tc.mul(g, tc.sum(tc.transpose(x, (2, 0, 1)), axis=(1, 2))))
        return f, {"x": x}

    def pooling(rng):
        x = leaf(rng, 3, 5, 4)
        return lambda: tc.sum(tc.mul(tc.max(x, axis=1), tc.mean(x, axis=1, keepdims=False))), {"x": x}

    def matmul2d(rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
        return lambda: tc.sum(tc.exp(tc.scale(tc.matmul(a, b), 0.1))), {"a": a, "b": b}

    def embedding(rng):
        table = leaf(rng, 6, 3)
        ids = np.array([[0, 2, 2], [5, 0, 1]])
        return lambda: tc.sum(tc.mul(tc.embedding_lookup(table, ids), tc.embedding_lookup(table, ids))), {"t": table}

    def log_softmax_l2(rng):
        x = leaf(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        return lambda: tc.sum(tc.mul(tc.add(tc.log_softmax(x), tc.l2_normalize(x)), w)), {"x": x}

    def smooth_max(rng):
        x = leaf(rng, 3, 5, 4)
        w = rng.normal(size=(3, 4))
        return lambda: tc.sum(tc.mul(tc.logsumexp(tc.scale(x, 4.0), axis=1), w)), {"x": x}

    return {f.__name__: f for f in (ce, layer_norm, attention_like, broadcast, unary, shapes, pooling,
                                    matmul2d, embedding, log_softmax_l2, smooth_max)}


CASES = _cases()


@pytest.mark.parametrize("case", sorted(CASES))
def test_op_gradients_match_central_differences(case):
    with tc.precision(np.float64):
        fn, params = CASES[case](np.random.default_rng(7))
        res = tc.gradcheck(fn, params, n_coords=40, seed=1)
    assert res.ok, res.failures[:3]


def test_second_backward_on_same_tape_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with tc.Tape() as tape:
        y = tc.sum(tc.mul(x, x))
    tc.backward(y, tape)
    with pytest.raises(tc.TapeError):
        tc.backward(y, tape)


def test_gradients_accumulate_on_leaves_across_tapes():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with tc.Tape() as tape:
            y = tc.sum(tc.scale(x, 3.0))
        tc.backward(y, tape)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_intermediate_tensors_get_no_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    with tc.Tape() as tape:
        h = tc.scale(x, 2.0)
        y = tc.sum(h)
    tc.backward(y, tape)
    assert h.grad is None and x.grad is not None


def test_backward_requires_scalar_and_recorded_loss():
    x = Tensor(np.ones(2), requires_grad=True)
    with tc.Tape() as tape:
        y = tc.scale(x, 2.0)
    with pytest.raises(tc.TapeError):
        tc.backward(y, tape)
    with pytest.raises(tc.TapeError):
        tc.backward(Tensor(1.0), tc.Tape())


def test_no_recording_outside_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with tc.Tape() as tape:
        pass
    tc.sum(x)
    assert len(tape) == 0


def test_cross_entropy_matches_direct_formula(rng):
    z = rng.normal(size=(5, 7)).astype(np.float32)
    gold = rng.integers(0, 7, size=5)
    w = np.array([1, 0, 1, 1, 0], dtype=np.float32)
    got = tc.cross_entropy(Tensor(z), gold, w).item()
    nll = [-(z[i, gold[i]] - math.log(sum(math.exp(v) for v in z[i]))) for i in range(5)]
    expect = sum(n * wi for n, wi in zip(nll, w)) / w.sum()
    assert got == pytest.approx(expect, rel=1e-5)


def test_cross_entropy_rejects_out_of_range_gold():
    with pytest.raises(IndexError):
        tc.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_layer_norm_matches_numpy(rng):
    x = rng.normal(size=(4, 8)).astype(np.float32)
    out = tc.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, ref, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = tc.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
              elements=st.floats(-10, 10)).filter(lambda a: np.all(np.abs(a).sum(-1) > 1e-3)))
def test_l2_normalize_gives_unit_rows(x):
    n = np.linalg.norm(tc.l2_normalize(Tensor(x)).data, axis=-1)
    np.testing.assert_allclose(n, 1.0, atol=1e-5)


def test_causal_mask_blocks_future_only():
    m = tc.causal_mask(4)
    assert m.dtype == bool
    assert np.array_equal(m, np.triu(np.ones((4, 4), dtype=bool), k=1))


def test_default_dtype_is_float32_and_precision_restores():
    assert Tensor([1.0]).data.dtype == np.float32
    with tc.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def _adam_reference(w, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adam_matches_reference_update(rng):
    with tc.precision(np.float64):
        w0 = rng.normal(size=4)
        p = Tensor(w0.copy(), requires_grad=True)
        opt = tc.Adam({"p": p})
        grads = [rng.normal(size=4) for _ in range(5)]
        for g in grads:
            p.grad = g.copy()
            opt.step()
    np.testing.assert_allclose(p.data, _adam_reference(w0, grads), rtol=1e-12)


def test_adam_clears_grads_and_requires_them():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = tc.Adam({"p": p})
    with pytest.raises(tc.TapeError):
        opt.step()
    p.grad = np.ones(2, dtype=np.float32)
    opt.step()
    assert p.grad is None and opt.step_count == 1


def test_adam_zero_lr_leaves_weights():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    before = p.data.copy()
    opt = tc.Adam({"p": p}, lr=0.0)
    p.grad = np.array([5.0, 5.0], dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adam_clip_norm_rescales_gradient():
    with tc.precision(np.float64):
        a = Tensor(np.zeros(2), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        opt = tc.Adam({"a": a}, clip_norm=1.0)
        ref = tc.Adam({"b": b})
        a.grad = np.array([30.0, 40.0])
        b.grad = np.array([0.6, 0.8])
        opt.step()
        ref.step()
    np.testing.assert_allclose(opt.m["a"], ref.m["b"])


def test_item_requires_single_element():
    with pytest.raises(tc.TensorError):
        Tensor(np.ones(3)).item()
