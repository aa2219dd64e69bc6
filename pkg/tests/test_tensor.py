import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polynext import tensor as T
from polynext.gradcheck import grad_check
from polynext.tensor import ShapeError, Tape, Tensor, param

from conftest import project

SHAPES = [(3,), (2, 5), (2, 3, 2, 2)]


# ------------------------------------------------------------------ oracles

def naive_conv(x, w, b, stride, padding, dilation, groups):
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, O, Ho, Wo))
    og = O // groups
    for n in range(B):
        for o in range(O):
            g = o // og
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(Cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[n, g * Cg + c, i * stride + u * dilation,
                                                          j * stride + v * dilation]
                    out[n, o, i, j] = acc
    return out


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv_configs(count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        groups = int(rng.choice([1, 2, 3]))
        depthwise = rng.random() < 0.25
        C = int(rng.integers(1, 3)) * groups
        O = C if depthwise else int(rng.integers(1, 3)) * groups
        if depthwise:
            groups = C
        k = int(rng.choice([1, 2, 3, 5]))
        stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        pad = int(rng.integers(0, 4))
        H, W = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        if T.conv2d_output_size(H, k, stride, pad, dil) < 1 or T.conv2d_output_size(W, k, stride, pad, dil) < 1:
            continue
        out.append((2, C, H, W, O, k, stride, pad, dil, groups, bool(rng.random() < 0.5)))
    return out


@pytest.mark.parametrize("cfg", conv_configs(50))
def test_conv2d_matches_naive_loops(cfg):
    B, C, H, W, O, k, stride, pad, dil, groups, bias = cfg
    rng = np.random.default_rng(hash(cfg) % 2**32)
    x = rng.standard_normal((B, C, H, W))
    w = rng.standard_normal((O, C // groups, k, k))
    b = rng.standard_normal(O) if bias else None
    got = T.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride, pad, dil, groups).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad, dil, groups), rtol=1e-12, atol=1e-12)


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((4, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-13)


def test_batched_matmul_broadcast(rng):
    a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((5, 2))
    out = T.matmul(Tensor(a), Tensor(b)).data
    for i, j in itertools.product(range(2), range(3)):
        np.testing.assert_allclose(out[i, j], naive_matmul(a[i, j], b), rtol=1e-13)


def test_linear_on_maps_is_pointwise_conv(rng):
    x, w, b = rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((5, 4)), rng.standard_normal(5)
    got = T.linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, naive_conv(x, w[:, :, None, None], b, 1, 0, 1, 1), rtol=1e-12)


def test_smoothed_cross_entropy_closed_form():
    z = np.array([[1.0, 2.0, 0.5]])
    p = np.exp(z) / np.exp(z).sum()
    t = np.array([0.1 / 3, 0.1 / 3 + 0.9, 0.1 / 3])
    got = T.smoothed_cross_entropy(Tensor(z), np.array([1]), 0.1).item()
    assert got == pytest.approx(-(t * np.log(p)).sum(), rel=1e-14)


# --------------------------------------------------------------- gradients

def away_from_zero(rng, shape):
    """Entries of magnitude in [0.3, 1.5]: keeps every gradient element well above roundoff."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.3, 1.5, size=shape)


def _check(f, *inputs, tol=1e-5):
    xs = [param(a) for a in inputs]
    rep = grad_check(lambda *t: project(f(*t)), xs, tol=tol)
    assert rep.passed, rep


UNARY = {
    "neg": T.neg,
    "scale": lambda x: T.scale(x, -1.7),
    "add_scalar": lambda x: T.add_scalar(x, 0.3),
    "sigmoid": T.sigmoid,
    "int_pow2": lambda x: T.int_pow(x, 2),
    "int_pow4": lambda x: T.int_pow(x, 4),
    "int_pow5": lambda x: T.int_pow(x, 5),
    "reshape": lambda x: T.reshape(x, (-1,)),
    "transpose": lambda x: T.transpose(x, tuple(reversed(range(x.ndim)))),
    "flip": lambda x: T.flip(x, 0),
    "sum_all": T.sum,
    "sum_axis0": lambda x: T.sum(x, 0),
    "mean_all": T.mean,
    "mean_last_keep": lambda x: T.mean(x, -1, keepdims=True),
    "normalize": lambda x: T.normalize(x, tuple(range(x.ndim)), 1e-5),
    "l1_normalize": lambda x: T.l1_normalize(x, -1),
}


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("op", sorted(UNARY))
def test_unary_gradients(op, shape):
    rng = np.random.default_rng(1)
    _check(UNARY[op], away_from_zero(rng, shape))


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("op", ["add", "sub", "hadamard"])
def test_binary_gradients(op, shape):
    rng = np.random.default_rng(2)
    _check(getattr(T, op), rng.standard_normal(shape), rng.standard_normal(shape))


@pytest.mark.parametrize("shape", SHAPES)
def test_broadcast_op_gradients(shape):
    rng = np.random.default_rng(3)
    x = rng.standard_normal(shape)
    _check(T.scalar_mul, np.array(0.7), x)
    axes = (x.ndim - 1,)
    v = rng.standard_normal(x.shape[-1])
    _check(lambda a, b: T.mul_along(a, b, axes), x, v)
    _check(lambda a, b: T.add_along(a, b, axes), x, v)
    _check(lambda a, b: T.mul_along(a, b, ()), x, np.array(1.3))


def test_index_gradient(rng):
    _check(lambda x: T.index(x, 2) * 1.0, rng.standard_normal(5))


@pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((2, 3, 4), (4, 2)), ((2, 1, 2, 3), (3, 3, 2))])
def test_matmul_gradient(shapes):
    rng = np.random.default_rng(4)
    _check(T.matmul, rng.standard_normal(shapes[0]), rng.standard_normal(shapes[1]))


@pytest.mark.parametrize("xshape", [(4, 3), (2, 3, 2, 2)])
def test_linear_gradient(xshape):
    rng = np.random.default_rng(5)
    _check(T.linear, rng.standard_normal(xshape), rng.standard_normal((2, 3)), rng.standard_normal(2))


@pytest.mark.parametrize("cfg", [
    dict(C=2, O=3, k=3, stride=1, padding=1, dilation=1, groups=1),
    dict(C=2, O=2, k=3, stride=2, padding=1, dilation=1, groups=1),
    dict(C=2, O=2, k=3, stride=1, padding=2, dilation=2, groups=2),
    dict(C=4, O=2, k=1, stride=1, padding=0, dilation=1, groups=2),
    dict(C=2, O=2, k=5, stride=1, padding=4, dilation=2, groups=2),
])
def test_conv2d_gradient(cfg):
    rng = np.random.default_rng(6)
    C, O, k, g = cfg["C"], cfg["O"], cfg["k"], cfg["groups"]
    x, w, b = rng.standard_normal((2, C, 4, 4)), rng.standard_normal((O, C // g, k, k)), rng.standard_normal(O)
    _check(lambda x, w, b: T.conv2d(x, w, b, cfg["stride"], cfg["padding"], cfg["dilation"], g), x, w, b)


def test_cross_entropy_gradient(rng):
    labels = np.array([0, 2, 1, 2])
    _check(lambda z: T.smoothed_cross_entropy(z, labels, 0.1), rng.standard_normal((4, 3)))


def test_grad_check_detects_wrong_gradient(rng):
    def bad(x):
        return T.make_op(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")  # missing factor 2
    rep = grad_check(lambda x: project(bad(x)), param(rng.standard_normal(4)))
    assert not rep.passed
    assert rep.max_rel_error > 0.3


def test_grad_check_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        grad_check(lambda x: T.sum(T.scale(x, float("inf"))), param(np.ones(2)))


# ----------------------------------------------------------------- the tape

def test_shared_subexpression_accumulates():
    x = param([3.0])
    with Tape() as tape:
        y = T.hadamard(x, x)
        z = T.sum(T.add(y, x))
    assert tape.backward(z)[x][0] == pytest.approx(7.0)


def test_backward_is_bitwise_deterministic(rng):
    a, b = param(rng.standard_normal((3, 4))), param(rng.standard_normal((4, 2)))

    def run():
        with Tape() as tape:
            y = T.sum(T.int_pow(T.matmul(a, b), 2))
        g = tape.backward(y)
        return g[a].tobytes() + g[b].tobytes()

    assert run() == run()


def test_constants_get_no_gradient(rng):
    c, x = Tensor(rng.standard_normal(3)), param(rng.standard_normal(3))
    with Tape() as tape:
        y = T.sum(T.hadamard(c, x))
    grads = tape.backward(y)
    assert c not in grads and x in grads


def test_no_tape_records_nothing(rng):
    y = T.add(param(np.ones(2)), param(np.ones(2)))
    assert y._tape is None


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 2)))
    with pytest.raises(ValueError):
        T.int_pow(Tensor(np.ones(2)), 0)


# --------------------------------------------------------------- properties

floats = st.floats(-3, 3, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(st.lists(floats, min_size=1, max_size=8), st.integers(1, 6))
def test_int_pow_matches_numpy(xs, p):
    x = np.array(xs)
    np.testing.assert_allclose(T.int_pow(Tensor(x), p).data, x ** p, rtol=1e-12, atol=1e-300)


@settings(max_examples=30, deadline=None)
@given(st.lists(floats, min_size=2, max_size=8))
def test_l1_normalize_has_unit_abs_sum(xs):
    x = np.array(xs) + 0.5 * np.sign(np.array(xs) + 1e-12)
    y = T.l1_normalize(Tensor(x), eps=0.0).data
    assert np.abs(y).sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 5), st.integers(0, 4), st.integers(1, 3), st.integers(1, 3))
def test_output_size_formula_matches_conv(size, k, pad, stride, dil):
    n = T.conv2d_output_size(size, k, stride, pad, dil)
    if n < 1:
        return
    y = T.conv2d(Tensor(np.ones((1, 1, size, size))), Tensor(np.ones((1, 1, k, k))), None, stride, pad, dil)
    assert y.shape == (1, 1, n, n)
