import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epdist import tensor as T
from epdist.errors import InvalidArgument
from epdist.tensor import Tape, Tensor


def naive_conv1d(x, w, b, stride, dilation, left, right):
    # scalar-loop reference, written independently of the vectorized op
    B, cin, L = x.shape
    cout, _, K = w.shape
    xp = np.zeros((B, cin, L + left + right))
    xp[:, :, left:left + L] = x
    lout = (xp.shape[2] - dilation * (K - 1) - 1) // stride + 1
    out = np.zeros((B, cout, lout))
    for n in range(B):
        for o in range(cout):
            for t in range(lout):
                acc = 0.0 if b is None else b[o]
                for c in range(cin):
                    for k in range(K):
                        acc += w[o, c, k] * xp[n, c, t * stride + k * dilation]
                out[n, o, t] = acc
    return out


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# conv1d


def test_conv1d_pairwise_sum():
    x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]], dtype=np.float32))
    w = Tensor(np.ones((1, 1, 2), dtype=np.float32))
    np.testing.assert_array_equal(T.conv1d(x, w).data.ravel(), [3, 5, 7])


def test_conv1d_dilated_pairs():
    x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]], dtype=np.float32))
    w = Tensor(np.ones((1, 1, 2), dtype=np.float32))
    np.testing.assert_array_equal(T.conv1d(x, w, dilation=2).data.ravel(), [4, 6])


def test_conv1d_unit_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 1, 50)).astype(np.float32)
    out = T.conv1d(Tensor(x), Tensor(np.ones((1, 1, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x)


@settings(max_examples=40, deadline=None)
@given(
    B=st.integers(1, 2), cin=st.integers(1, 3), cout=st.integers(1, 3), L=st.integers(1, 12),
    K=st.integers(1, 4), stride=st.integers(1, 3), dilation=st.integers(1, 3),
    left=st.integers(0, 4), right=st.integers(0, 4), use_bias=st.booleans(), seed=st.integers(0, 2**16),
)
def test_conv1d_matches_loop_reference(B, cin, cout, L, K, stride, dilation, left, right, use_bias, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, cin, L))
    w = rng.standard_normal((cout, cin, K))
    b = rng.standard_normal(cout) if use_bias else None
    lout = (L + left + right - dilation * (K - 1) - 1) // stride + 1
    with T.precision(np.float64):
        if lout < 1:
            with pytest.raises(InvalidArgument):
                T.conv1d(t64(x), t64(w), None if b is None else t64(b), stride, dilation, (left, right))
            return
        got = T.conv1d(t64(x), t64(w), None if b is None else t64(b), stride, dilation, (left, right)).data
    np.testing.assert_allclose(got, naive_conv1d(x, w, b, stride, dilation, left, right), rtol=1e-12, atol=1e-12)


def test_conv1d_symmetric_int_padding():
    x = np.arange(5, dtype=np.float64)[None, None]
    with T.precision(np.float64):
        out = T.conv1d(t64(x), t64(np.ones((1, 1, 3))), padding=1).data.ravel()
    np.testing.assert_array_equal(out, [1, 3, 6, 9, 7])


def test_conv1d_errors():
    x = Tensor(np.zeros((1, 2, 5), np.float32))
    with pytest.raises(InvalidArgument, match="channel"):
        T.conv1d(x, Tensor(np.zeros((1, 3, 2), np.float32)))
    with pytest.raises(InvalidArgument, match="length"):
        T.conv1d(x, Tensor(np.zeros((1, 2, 7), np.float32)))
    with pytest.raises(InvalidArgument):
        T.conv1d(x, Tensor(np.zeros((1, 2, 2), np.float32)), stride=0)
    with pytest.raises(InvalidArgument):
        T.conv1d(x, Tensor(np.zeros((1, 2, 2), np.float32)), padding=-1)


# ---------------------------------------------------------------------------
# dense, relu, residual_add, pooling, loss


def test_dense_identity_and_sum():
    out = T.dense(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1, 0]])
    out = T.dense(Tensor([[2.0, 3.0]]), Tensor([[1.0, 1.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [[6]])


def test_dense_mismatch():
    with pytest.raises(InvalidArgument):
        T.dense(Tensor([[1.0, 2.0, 3.0]]), Tensor([[1.0, 1.0]]))


def test_relu_values_and_grad():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert not T.relu(Tensor([-3.0, -0.5, -1e-9])).data.any()
    x = Tensor([2.0, -1.0, 0.0], requires_grad=True)
    with Tape() as tape:
        y = T.relu(x)
    T.backward(y, tape, grad_output=np.ones(3))
    np.testing.assert_array_equal(x.grad, [1, 0, 0])


def test_residual_add_values_and_equal_grads():
    np.testing.assert_array_equal(T.residual_add(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).data, [1, 2])
    a, b = Tensor([1.0, 2.0], requires_grad=True), Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        y = T.residual_add(a, b)
    np.testing.assert_array_equal(y.data, [4, 6])
    up = np.array([0.3, -7.0], dtype=np.float32)
    T.backward(y, tape, grad_output=up)
    np.testing.assert_array_equal(a.grad, up)
    np.testing.assert_array_equal(a.grad, b.grad)


def test_residual_add_shape_mismatch():
    with pytest.raises(InvalidArgument):
        T.residual_add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_global_avg_pool():
    np.testing.assert_array_equal(T.global_avg_pool(Tensor([[[1.0, 3.0]]])).data, [[2]])
    np.testing.assert_allclose(T.global_avg_pool(Tensor(np.full((2, 3, 7), 2.5, np.float32))).data, 2.5)
    x = Tensor(np.zeros((1, 2, 4), np.float32), requires_grad=True)
    with Tape() as tape:
        y = T.global_avg_pool(x)
    T.backward(y, tape, grad_output=np.array([[1.0, 2.0]]))
    np.testing.assert_allclose(x.grad, [[[0.25] * 4, [0.5] * 4]])


def test_l1_loss_values():
    assert T.l1_loss(Tensor([5.0]), Tensor([3.0])).item() == 2.0
    assert T.l1_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert T.l1_loss(Tensor([1.0, 3.0]), Tensor([2.0, 1.0])).item() == 1.5
    with pytest.raises(InvalidArgument):
        T.l1_loss(Tensor(np.zeros(0, np.float32)), Tensor(np.zeros(0, np.float32)))


def test_l1_subgradient_at_zero():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.l1_loss(p, Tensor([1.0, 0.0]))
    T.backward(loss, tape)
    np.testing.assert_array_equal(p.grad, [0.0, 0.5])


# ---------------------------------------------------------------------------
# backward


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = T.reshape(T.mul(x, x), ())
    T.backward(y, tape)
    assert x.grad[0] == 6.0


def test_backward_fan_out_accumulates():
    a = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = T.reshape(a + a, ())
    T.backward(y, tape)
    assert a.grad[0] == 2.0


def test_backward_rejects_non_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.relu(a)
    with pytest.raises(InvalidArgument, match="scalar"):
        T.backward(y, tape)


def test_backward_rejects_foreign_loss():
    a = Tensor([1.0], requires_grad=True)
    with Tape():
        y = T.reshape(T.mul(a, a), ())
    with pytest.raises(InvalidArgument):
        T.backward(y, Tape())


def test_no_grad_buffer_without_requires_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    with Tape() as tape:
        loss = T.l1_loss(T.mul(a, c), Tensor([0.0, 0.0]))
    T.backward(loss, tape)
    assert c.grad is None
    assert a.grad.shape == a.shape


def test_intermediate_grads_only_with_retain():
    a = Tensor([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        h = T.mul(a, Tensor([2.0, 2.0]))
        loss = T.l1_loss(h, Tensor([0.0, 0.0]))
    T.backward(loss, tape)
    assert h.grad is None
    a.zero_grad()
    T.backward(loss, tape, retain_grad=True)
    np.testing.assert_array_equal(h.grad, [0.5, -0.5])


def test_tape_is_topological():
    x = Tensor(np.ones((1, 1, 8), np.float32), requires_grad=True)
    w = Tensor(np.ones((1, 1, 3), np.float32), requires_grad=True)
    with Tape() as tape:
        y = T.global_avg_pool(T.relu(T.conv1d(x, w)))
        T.l1_loss(T.reshape(y, (1,)), Tensor([0.0]))
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp is not None and inp.node is not None:
                assert id(inp) in produced
        produced.add(id(node.output))


def _tiny_graph(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 2, 30)).astype(np.float32))
    w = Tensor(rng.standard_normal((4, 2, 3)).astype(np.float32), requires_grad=True)
    b = Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
    d = Tensor(rng.standard_normal((1, 4)).astype(np.float32), requires_grad=True)
    with Tape() as tape:
        h = T.relu(T.conv1d(x, w, b, dilation=2, padding=(4, 0)))
        y = T.reshape(T.dense(T.global_avg_pool(h), d), (3,))
        loss = T.l1_loss(y, Tensor(np.ones(3, np.float32)))
    T.backward(loss, tape)
    return loss.data.copy(), w.grad.copy(), b.grad.copy(), d.grad.copy()


def test_replay_is_bitwise_identical():
    first, second = _tiny_graph(4), _tiny_graph(4)
    for a, b in zip(first, second):
        assert a.tobytes() == b.tobytes()


def test_precision_is_thread_local():
    seen = {}

    def worker():
        seen["dtype"] = T.default_dtype()

    with T.precision(np.float64):
        assert T.default_dtype() == np.float64
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert seen["dtype"] == np.float32
    assert T.default_dtype() == np.float32


# ---------------------------------------------------------------------------
# normalization helpers


def test_weight_standardize_rows():
    w = Tensor(np.random.default_rng(1).standard_normal((5, 3, 7)) * 4 + 2)
    z = T.weight_standardize(w).data.reshape(5, -1)
    np.testing.assert_allclose(z.mean(axis=1), 0, atol=1e-6)
    # unit variance scaled by 1/sqrt(fan_in)
    np.testing.assert_allclose(z.var(axis=1) * 21, 1, rtol=1e-4)


def test_batch_norm_training_and_eval():
    rng = np.random.default_rng(2)
    x = Tensor((rng.standard_normal((8, 3, 40)) * 3 + 5).astype(np.float32))
    scale, shift = Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32))
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    y = T.batch_norm(x, scale, shift, rm, rv, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-4)
    np.testing.assert_allclose(y.std(axis=(0, 2)), 1, atol=1e-3)
    bm = x.data.mean(axis=(0, 2))
    bv = x.data.var(axis=(0, 2)) * 320 / 319
    np.testing.assert_allclose(rm, 0.1 * bm, rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * bv, rtol=1e-5)
    y_eval = T.batch_norm(x, scale, shift, rm, rv, training=False).data
    np.testing.assert_allclose(y_eval, (x.data - rm[None, :, None]) / np.sqrt(rv[None, :, None] + 1e-5), rtol=1e-4)


# ---------------------------------------------------------------------------
# gradient checks (the full suite, with both models, is in test_acceptance)


def _conv_case(stride, dilation, padding, bias=True):
    def make(rng):
        d = {"x": rng.standard_normal((2, 3, 17)), "w": rng.standard_normal((4, 3, 3))}
        if bias:
            d["b"] = rng.standard_normal(4)
        return d

    def fn(x, w, b=None):
        return T.conv1d(x, w, b, stride=stride, dilation=dilation, padding=padding)
    return fn, make


@pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 0), (2, 1, 1), (1, 3, (6, 0)), (3, 2, (2, 5))])
def test_grad_check_conv1d(stride, dilation, padding):
    fn, make = _conv_case(stride, dilation, padding)
    rep = T.grad_check(fn, make, trials=10, name="conv1d")
    assert rep.passed, rep.summary()


def test_grad_check_dense():
    rep = T.grad_check(T.dense, lambda r: {"x": r.standard_normal((3, 5)), "weight": r.standard_normal((4, 5)),
                                           "bias": r.standard_normal(4)}, trials=10)
    assert rep.passed, rep.summary()


def test_relu_away_from_zero_is_exact():
    def make(rng):
        x = rng.uniform(0.5, 2.0, 20) * rng.choice([-1.0, 1.0], 20)
        return {"x": x}
    rep = T.grad_check(T.relu, make, trials=10)
    assert rep.passed
    assert rep.kink_redraws == 0
    # the finite difference of a linear piece is exact up to roundoff
    assert rep.worst < 1e-7
    x = Tensor(make(np.random.default_rng(0))["x"], requires_grad=True)
    with Tape() as tape:
        y = T.relu(x)
    T.backward(y, tape, grad_output=np.ones(x.shape))
    np.testing.assert_array_equal(x.grad, (x.data > 0).astype(float))


def test_grad_check_redraws_kink_crossings():
    # inputs within the FD step of zero flip the ReLU pattern and must be skipped
    def make(rng):
        return {"x": np.r_[rng.uniform(-5e-6, 5e-6, 5), rng.uniform(1, 2, 30)]}
    rep = T.grad_check(T.relu, make, trials=3, max_coords=10)
    assert rep.passed
    assert rep.kink_redraws > 0


def test_grad_check_flags_wrong_gradient():
    def doubled_with_unit_grad(x):
        return T._record("bad", x.data * 2, (x,), lambda g: (g,))

    rep = T.grad_check(doubled_with_unit_grad, lambda r: {"x": r.standard_normal(5)}, trials=2)
    assert not rep.passed
    assert rep.worst == pytest.approx(0.5)


@pytest.mark.parametrize("name,fn,make", [
    ("residual_add", T.residual_add, lambda r: {"a": r.standard_normal((2, 3)), "b": r.standard_normal((2, 3))}),
    ("mul", T.mul, lambda r: {"a": r.standard_normal(6), "b": r.standard_normal(6)}),
    ("global_avg_pool", T.global_avg_pool, lambda r: {"x": r.standard_normal((2, 3, 9))}),
    ("l1_loss", T.l1_loss, lambda r: {"pred": r.standard_normal(7), "target": r.standard_normal(7)}),
    ("weight_standardize", T.weight_standardize, lambda r: {"w": r.standard_normal((4, 3, 5))}),
    ("reshape", lambda x: T.reshape(x, (6, 2)), lambda r: {"x": r.standard_normal((3, 4))}),
    ("scale_shift", lambda x: T.scale_shift(x, 3.5, -2.0), lambda r: {"x": r.standard_normal(5)}),
])
def test_grad_check_ops(name, fn, make):
    rep = T.grad_check(fn, make, trials=10, name=name)
    assert rep.passed, rep.summary()


def test_grad_check_batch_norm_training():
    def make(rng):
        return {"x": rng.standard_normal((4, 3, 11)) * 2 + 1, "scale": rng.uniform(0.5, 2, 3),
                "shift": rng.standard_normal(3)}

    def fn(x, scale, shift):
        return T.batch_norm(x, scale, shift, np.zeros(3), np.ones(3), training=True)
    rep = T.grad_check(fn, make, trials=10, name="batch_norm")
    assert rep.passed, rep.summary()
