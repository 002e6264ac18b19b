import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histoattn import ops
from histoattn.errors import BroadcastError, ConfigError, ContractError, ShapeError
from histoattn.gradcheck import check_gradients, finite_difference_grad
from histoattn.tensor import Tensor, build_tape, dump_json, load_json, no_grad


def naive_conv(x, w, stride, padding, groups):
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    OH = (H + 2 * padding - kh) // stride + 1
    OW = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, OH, OW))
    og = O // groups
    for b in range(B):
        for o in range(O):
            g = o // og
            for y in range(OH):
                for xx in range(OW):
                    acc = 0.0
                    for c in range(Cg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[o, c, i, j] * xp[b, g * Cg + c, y * stride + i, xx * stride + j]
                    out[b, o, y, xx] = acc
    return out


def naive_pool(x, kind, k, stride):
    B, C, H, W = x.shape
    OH, OW = (H - k) // stride + 1, (W - k) // stride + 1
    out = np.zeros((B, C, OH, OW))
    for b in range(B):
        for c in range(C):
            for y in range(OH):
                for xx in range(OW):
                    win = [x[b, c, y * stride + i, xx * stride + j] for i in range(k) for j in range(k)]
                    out[b, c, y, xx] = max(win) if kind == "max" else sum(win) / len(win)
    return out


# ---- elementwise -----------------------------------------------------------

def test_sigmoid_and_relu_examples():
    assert ops.sigmoid(0.0).item() == 0.5
    assert ops.relu(-3.2).item() == 0.0
    assert ops.relu(3.2).item() == 3.2
    # high-precision reference via exact rational arithmetic on a long series for e^-2
    e_m2 = sum(Fraction((-2) ** k, math.factorial(k)) for k in range(60))
    ref = 1 / (1 + e_m2)
    assert abs(ops.sigmoid(2.0).item() - float(ref)) < 1e-15
    assert abs(ops.sigmoid(2.0).item() - 0.880797) < 1e-6


def test_sigmoid_is_stable_at_extremes():
    s = ops.sigmoid(np.array([-800.0, 800.0])).data
    assert np.all(np.isfinite(s))
    assert 0.0 < s[0] < 1e-300 and 1.0 - 1e-15 < s[1] < 1.0


def test_elementwise_dispatch_matches_named_ops(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    assert np.array_equal(ops.elementwise("add", a, b).data, a + b)
    assert np.array_equal(ops.elementwise("sub", a, b).data, a - b)
    assert np.array_equal(ops.elementwise("mul", a, b).data, a * b)
    assert np.array_equal(ops.elementwise("tanh", a).data, np.tanh(a))
    assert np.array_equal(ops.elementwise("scale", a, factor=2.5).data, a * 2.5)
    with pytest.raises(BroadcastError):
        ops.elementwise("add", np.zeros((2, 3)), np.zeros((4,)))


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.data())
def test_broadcast_shape_and_gradient_reduction(shape, draw):
    # derive a compatible partner: drop leading dims and set some extents to 1
    k = draw.draw(st.integers(0, len(shape)))
    other = [1 if draw.draw(st.booleans()) else n for n in shape[len(shape) - k:]]
    a = Tensor(np.ones(shape), requires_grad=True)
    b = Tensor(np.ones(other), requires_grad=True)
    out = ops.add(a, b)
    assert out.shape == np.broadcast_shapes(tuple(shape), tuple(other))
    ops.sum(out).backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    # each element of b is reused prod(out)/prod(b) times
    assert np.all(b.grad == out.data.size / max(b.data.size, 1))


# ---- matmul / dense ----------------------------------------------------------

def test_matmul_examples(rng):
    x = rng.normal(size=(3, 5))
    assert np.array_equal(ops.matmul(np.eye(3), x).data, x)
    assert ops.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]])).data.tolist() == [[17.0], [39.0]]
    assert ops.matmul(np.array([[3.0]]), np.array([[-2.0]])).data.tolist() == [[-6.0]]
    with pytest.raises(ShapeError):
        ops.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_matmul_gradients_closed_form(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = rng.normal(size=(3, 2))
    ops.sum(ops.mul(ops.matmul(a, b), g)).backward()
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-14)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-14)


def test_dense_examples(rng):
    x = rng.normal(size=(4, 3))
    bias = np.array([1.0, -2.0])
    assert np.array_equal(ops.dense(x, np.zeros((3, 2)), bias).data, np.tile(bias, (4, 1)))
    assert np.array_equal(ops.dense(x, np.eye(3), np.zeros(3)).data, x)
    w, b = rng.normal(size=(3, 5)), rng.normal(size=5)
    assert np.array_equal(ops.dense(x, w, b).data, ops.add(ops.matmul(x, w), b).data)


# ---- convolution -------------------------------------------------------------

def test_conv_trivial_examples(rng):
    x = rng.normal(size=(2, 1, 4, 5))
    assert np.array_equal(ops.conv2d(x, np.ones((1, 1, 1, 1))).data, x)
    assert ops.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3))).data.reshape(-1).tolist() == [9.0]


@pytest.mark.parametrize("cin,cout,groups,stride,padding", [
    (1, 1, 1, 1, 0), (3, 4, 1, 1, 1), (3, 2, 1, 2, 1), (4, 4, 4, 1, 1), (6, 6, 6, 2, 1), (4, 6, 2, 1, 0),
])
def test_conv_matches_naive_loops(rng, cin, cout, groups, stride, padding):
    x = rng.normal(size=(2, cin, 5, 5))
    w = rng.normal(size=(cout, cin // groups, 3, 3))
    got = ops.conv2d(x, w, stride, padding, groups).data
    assert np.max(np.abs(got - naive_conv(x, w, stride, padding, groups))) < 1e-12


@pytest.mark.parametrize("groups,cin,cout", [(1, 3, 4), (3, 3, 3), (2, 4, 6)])
def test_conv_gradients(rng, groups, cin, cout):
    x = Tensor(rng.normal(size=(2, cin, 6, 5)))
    w = Tensor(rng.normal(size=(cout, cin // groups, 3, 3)))
    b = Tensor(rng.normal(size=cout))
    r = rng.normal(size=(2, cout, 3, 3))
    res = check_gradients(lambda: ops.sum(ops.mul(ops.conv2d(x, w, 2, 1, groups, bias=b), r)),
                          {"x": x, "w": w, "b": b})
    assert all(g.passed for g in res), res


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(0, 2))
def test_conv_shape_formula(h, w, k, stride, padding):
    x = np.zeros((1, 1, h, w))
    ker = np.zeros((1, 1, k, k))
    oh, ow = (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        with pytest.raises(ShapeError):
            ops.conv2d(x, ker, stride, padding)
    else:
        assert ops.conv2d(x, ker, stride, padding).shape == (1, 1, oh, ow)


# ---- pooling -----------------------------------------------------------------

def test_pool_examples():
    assert np.array_equal(ops.pool2d(np.full((1, 2, 4, 4), 3.5), "avg", 2, 2).data, np.full((1, 2, 2, 2), 3.5))
    assert ops.pool2d(np.array([[[[1.0, 2], [3, 4]]]]), "max", 2, 2).data.item() == 4.0
    with pytest.raises(ShapeError):
        ops.pool2d(np.zeros((1, 1, 2, 2)), "max", 3, 3)


@pytest.mark.parametrize("kind", ["avg", "max"])
@pytest.mark.parametrize("k,stride", [(2, 2), (3, 1), (3, 2)])
def test_pool_matches_naive_loops(rng, kind, k, stride):
    x = rng.normal(size=(2, 3, 7, 6))
    assert np.max(np.abs(ops.pool2d(x, kind, k, k, stride).data - naive_pool(x, kind, k, stride))) < 1e-12


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(1, 3))
def test_pool_shape_formula(h, w, k, stride):
    x = np.zeros((1, 1, h, w))
    if k > h or k > w:
        with pytest.raises(ShapeError):
            ops.pool2d(x, "avg", k, k, stride)
    else:
        assert ops.pool2d(x, "avg", k, k, stride).shape == (1, 1, (h - k) // stride + 1, (w - k) // stride + 1)


def test_max_pool_gradient_only_at_argmax_first_tie(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    ops.sum(ops.pool2d(x, "max", 2, 2)).backward()
    assert np.count_nonzero(x.grad) == 2 * 9
    for c in range(2):
        for y in range(3):
            for xx in range(3):
                win = x.data[0, c, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2]
                gwin = x.grad[0, c, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2]
                assert gwin.reshape(-1)[np.argmax(win)] == 1.0
    t = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    ops.sum(ops.pool2d(t, "max", 2, 2)).backward()
    assert t.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_global_pool(rng):
    assert np.array_equal(ops.global_pool(np.full((2, 3, 4, 4), -1.5), "avg").data, np.full((2, 3), -1.5))
    m = np.arange(1.0, 5.0).reshape(1, 1, 2, 2)
    assert ops.global_pool(m, "avg").item() == 2.5
    assert ops.global_pool(m, "max").item() == 4.0
    x = rng.normal(size=(2, 3, 5, 4))
    flat = [[sum(x[b, c].reshape(-1).tolist()) / 20 for c in range(3)] for b in range(2)]
    assert np.max(np.abs(ops.global_pool(x, "avg").data - np.array(flat))) < 1e-12


# ---- softmax -----------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(ops.softmax(np.zeros(5)).data, 0.2, atol=1e-15)
    s = ops.softmax(np.array([0.0, math.log(3.0)])).data
    assert abs(s[0] - 0.25) < 1e-15 and abs(s[1] - 0.75) < 1e-15


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_properties(xs, c):
    x = np.array(xs)
    s = ops.softmax(x).data
    assert abs(s.sum() - 1.0) < 1e-12 and np.all(s > 0)
    assert np.allclose(ops.softmax(x + c).data, s, rtol=1e-9, atol=1e-15)
    assert np.allclose(ops.log_softmax(x).data, np.log(s), atol=1e-12)


def test_softmax_gradients(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    r = rng.normal(size=(3, 4))
    for fn in (ops.softmax, ops.log_softmax):
        res = check_gradients(lambda: ops.sum(ops.mul(fn(x, axis=1), r)), {"x": x})
        assert res[0].passed


# ---- dropout -----------------------------------------------------------------

def test_dropout_contract(rng):
    x = rng.normal(size=(10, 10))
    assert np.array_equal(ops.dropout(x, 0.0, True, 1).data, x)
    assert np.array_equal(ops.dropout(x, 0.9, False, 1).data, x)
    assert np.array_equal(ops.dropout(x, 0.4, True, 7).data, ops.dropout(x, 0.4, True, 7).data)
    with pytest.raises(ConfigError):
        ops.dropout(x, 1.0, True, 0)


def test_dropout_statistics():
    out = ops.dropout(np.ones(100_000), 0.4, True, 2024).data
    assert abs(np.mean(out == 0) - 0.4) < 0.01
    assert np.allclose(out[out != 0], 1 / 0.6)


# ---- backward / tape ---------------------------------------------------------

def test_backward_polynomial_examples(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    ops.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 2)))
    x.zero_grad()
    ops.sum(ops.mul(x, x)).backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ops.mul(x, 2.0).backward()
    with pytest.raises(ContractError):
        Tensor(np.ones(())).backward()


def test_tape_topological_order_and_single_visit(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    y = ops.mul(x, x)
    z = ops.add(y, ops.sigmoid(y))
    root = ops.sum(ops.mul(z, y))
    tape = build_tape(root)
    pos = {id(n): i for i, n in enumerate(tape)}
    assert len(pos) == len(tape)
    for n in tape:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_no_grad_disables_tracking():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ops.mul(x, 3.0)
    assert not y.requires_grad


def test_composite_graph_gradcheck(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4,)))
    obj = lambda: ops.sum(ops.tanh(ops.mul(ops.sigmoid(ops.add(a, b)), ops.exp(ops.scale(a, 0.3)))))  # noqa: E731
    assert all(r.passed for r in check_gradients(obj, {"a": a, "b": b}))


def test_finite_difference_examples(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    assert np.allclose(finite_difference_grad(lambda t: ops.sum(t), x), 1.0, atol=1e-9)
    three = Tensor(np.array([3.0]))
    g = finite_difference_grad(lambda t: ops.sum(ops.mul(t, t)), three)
    assert abs(g[0] - 6.0) < 1e-6


def test_seeded_program_replays_bitwise():
    def run():
        r = np.random.default_rng(5)
        x = Tensor(r.normal(size=(1, 2, 6, 6)), requires_grad=True)
        w = Tensor(r.normal(size=(3, 2, 3, 3)), requires_grad=True)
        y = ops.dropout(ops.relu(ops.conv2d(x, w, padding=1)), 0.3, True, 11)
        ops.sum(ops.softmax(ops.reshape(y, (1, -1)), axis=1)).backward()
        return y.data.tobytes() + x.grad.tobytes() + w.grad.tobytes()
    assert run() == run()


def test_json_dump_round_trip(rng):
    t = Tensor(rng.normal(size=(2, 3, 1)))
    back = load_json(dump_json(t))
    assert back.shape == t.shape and np.array_equal(back.data, t.data)
