"""Dense float64 tensors and a reverse-mode differentiation tape.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active, every
operation that touches a gradient-requiring tensor is appended to the tape
together with a closure computing its vector-Jacobian product. Outside a tape
nothing is recorded, which is the fast path used for inference.

Broadcasting is deliberately narrow: ``matmul`` broadcasts leading batch axes,
``scalar_mul`` multiplies by a 0-d tensor, and ``mul_along``/``add_along``
broadcast a small parameter over explicitly named axes. Everything else demands
identical shapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "make_op",
    "as_tensor",
    "param",
    "add",
    "sub",
    "neg",
    "hadamard",
    "scale",
    "add_scalar",
    "scalar_mul",
    "mul_along",
    "add_along",
    "matmul",
    "linear",
    "conv2d",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "flip",
    "index",
    "sigmoid",
    "int_pow",
    "normalize",
    "l1_normalize",
    "smoothed_cross_entropy",
    "conv2d_output_size",
    "conv2d_array",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_ACTIVE_TAPES: list["Tape"] = []


def _current_tape() -> "Tape | None":
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    ``requires_grad`` marks a leaf whose gradient the tape should report.
    ``no_decay`` is optimizer metadata (exempt from weight decay).
    """

    __slots__ = ("data", "requires_grad", "name", "no_decay", "_tape", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 no_decay: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.no_decay = no_decay
        self._tape: Tape | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        t.no_decay = False
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def isfinite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.ndim == 0 and self.ndim != 0:
                return scalar_mul(other, self)
            if self.ndim == 0 and other.ndim != 0:
                return scalar_mul(self, other)
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name: str | None = None, no_decay: bool = False) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name, no_decay=no_decay)


class _Node:
    __slots__ = ("kind", "inputs", "backward", "leaf")

    def __init__(self, kind, inputs, backward, leaf=None):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward
        self.leaf = leaf


class Tape:
    """Ordered record of executed operations.

    Use as a context manager around the forward pass, then call
    :meth:`backward` on a scalar result. Node ids are assigned in execution
    order, so reverse id order is a valid topological order and gradient
    accumulation is deterministic.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        if t.requires_grad:
            key = id(t)
            nid = self._leaf_ids.get(key)
            if nid is None:
                nid = len(self.nodes)
                self.nodes.append(_Node("leaf", (), None, leaf=t))
                self._leaf_ids[key] = nid
            return nid
        return None

    def leaves(self) -> list[Tensor]:
        return [n.leaf for n in self.nodes if n.kind == "leaf"]

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of ``loss`` with respect to every leaf seen on this tape."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        out: dict[Tensor, np.ndarray] = {}
        if loss._tape is not self:
            if loss.requires_grad and id(loss) in self._leaf_ids:
                out[loss] = np.ones_like(loss.data)
            for leaf in self.leaves():
                out.setdefault(leaf, np.zeros_like(leaf.data))
            return out
        grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        for nid in range(len(self.nodes) - 1, -1, -1):
            g = grads.pop(nid, None)
            node = self.nodes[nid]
            if node.kind == "leaf":
                out[node.leaf] = g if g is not None else np.zeros_like(node.leaf.data)
                continue
            if g is None:
                continue
            in_grads = node.backward(g)
            for iid, ig in zip(node.inputs, in_grads):
                if iid is None or ig is None:
                    continue
                prev = grads.get(iid)
                grads[iid] = ig if prev is None else prev + ig
        return out


def make_op(out: np.ndarray, inputs: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
            kind: str) -> Tensor:
    """Wrap a forward result and register its gradient rule on the active tape.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per input, each shaped like that input.
    """
    result = Tensor._wrap(out)
    tape = _current_tape()
    if tape is None:
        return result
    ids = tuple(tape._node_of(t) for t in inputs)
    if all(i is None for i in ids):
        return result
    nid = len(tape.nodes)
    tape.nodes.append(_Node(kind, ids, backward))
    result._tape = tape
    result._node = nid
    return result


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_op(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def scalar_mul(s: Tensor, x: Tensor) -> Tensor:
    """0-d tensor times tensor."""
    if s.ndim != 0:
        raise ShapeError(f"scalar_mul: expected a 0-d scale, got {s.shape}")
    sd, xd = s.data, x.data

    def backward(g):
        return np.asarray(np.vdot(g, xd)), g * sd

    return make_op(sd * xd, (s, x), backward, "scalar_mul")


def _along_shape(x: Tensor, v: Tensor, axes: Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    axes = tuple(a % x.ndim for a in axes)
    expected = tuple(x.shape[a] for a in axes)
    if v.shape != expected:
        raise ShapeError(f"expected operand of shape {expected} for axes {axes} of {x.shape}, got {v.shape}")
    if list(axes) != sorted(axes):
        raise ShapeError("axes must be increasing")
    bshape = tuple(x.shape[i] if i in axes else 1 for i in range(x.ndim))
    others = tuple(i for i in range(x.ndim) if i not in axes)
    return bshape, others


def mul_along(x: Tensor, v: Tensor, axes: Sequence[int]) -> Tensor:
    """Multiply ``x`` by ``v`` broadcast over every axis not listed in ``axes``."""
    bshape, others = _along_shape(x, v, axes)
    vb = v.data.reshape(bshape)
    xd = x.data

    def backward(g):
        gv = (g * xd).sum(axis=others).reshape(v.shape) if others else (g * xd).reshape(v.shape)
        return g * vb, gv

    return make_op(xd * vb, (x, v), backward, "mul_along")


def add_along(x: Tensor, v: Tensor, axes: Sequence[int]) -> Tensor:
    """Add ``v`` broadcast over every axis not listed in ``axes``."""
    bshape, others = _along_shape(x, v, axes)
    vb = v.data.reshape(bshape)

    def backward(g):
        gv = g.sum(axis=others).reshape(v.shape) if others else g.reshape(v.shape)
        return g, gv

    return make_op(x.data + vb, (x, v), backward, "add_along")


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def int_pow(x: Tensor, p: int) -> Tensor:
    """``x**p`` for a positive integer ``p`` by repeated multiplication."""
    if int(p) != p or p < 1:
        raise ValueError(f"int_pow needs a positive integer exponent, got {p}")
    p = int(p)
    xd = x.data
    powers = [xd]
    for _ in range(p - 1):
        powers.append(powers[-1] * xd)

    def backward(g):
        return (g * (p * powers[p - 2]) if p > 1 else g,)

    return make_op(powers[-1], (x,), backward, "int_pow")


# ------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "transpose")


def flip(x: Tensor, axis: int) -> Tensor:
    return make_op(np.flip(x.data, axis=axis).copy(), (x,),
                   lambda g: (np.flip(g, axis=axis),), "flip")


def index(x: Tensor, i: int) -> Tensor:
    """Element ``i`` of a 1-d tensor as a 0-d tensor."""
    if x.ndim != 1:
        raise ShapeError(f"index expects a vector, got {x.shape}")
    n = x.shape[0]

    def backward(g):
        out = np.zeros(n)
        out[i] = g
        return (out,)

    return make_op(np.asarray(x.data[i]), (x,), backward, "index")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(y), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([shape[a] for a in axes]))
    y = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_op(np.asarray(y), (x,), backward, "mean")


# ------------------------------------------------------------- linear algebra

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_op(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Project the feature axis (axis 1) of ``x`` with ``w`` of shape (out, in).

    Works for (N, d) rows and (B, C, H, W) maps alike; for maps this is a
    pointwise (1x1) convolution.
    """
    if x.ndim < 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    if x.ndim == 2:
        y = xd @ wd.T
    else:
        y = np.moveaxis(np.moveaxis(xd, 1, -1) @ wd.T, -1, 1)
    if b is not None:
        y = y + b.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    y = np.ascontiguousarray(y)
    rest = tuple(i for i in range(x.ndim) if i != 1)

    def backward(g):
        if g.ndim == 2:
            gx = g @ wd
            gw = g.T @ xd
        else:
            gx = np.ascontiguousarray(np.moveaxis(np.moveaxis(g, 1, -1) @ wd, -1, 1))
            gw = np.tensordot(g, xd, axes=(rest, rest))
        gb = g.sum(axis=rest) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_op(y, inputs, (lambda g: backward(g)[:2]) if b is None else backward, "linear")


def conv2d_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _conv_geometry(x_shape, w_shape, stride, padding, dilation, groups):
    B, C, H, W = x_shape
    O, Cg, kh, kw = w_shape
    if groups < 1 or C % groups or O % groups:
        raise ShapeError(f"conv2d: channels {C}->{O} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d: weight {w_shape} expects {Cg * groups} input channels, got {C}")
    Ho = conv2d_output_size(H, kh, stride, padding, dilation)
    Wo = conv2d_output_size(W, kw, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {H}x{W} too small for kernel {kh}x{kw} "
                         f"(dilation {dilation}, padding {padding})")
    return B, C, H, W, O, Cg, kh, kw, Ho, Wo


def _tap_slice(i, j, Ho, Wo, stride, dilation):
    return (slice(None), slice(None),
            slice(i * dilation, i * dilation + stride * (Ho - 1) + 1, stride),
            slice(j * dilation, j * dilation + stride * (Wo - 1) + 1, stride))


def _live_taps(kh, kw, H, W, Ho, Wo, stride, padding, dilation):
    """Kernel taps whose sampling window touches at least one unpadded pixel."""
    def live(k, size, out):
        pos = np.arange(k)[:, None] * dilation + stride * np.arange(out)[None, :]
        return ((pos >= padding) & (pos < padding + size)).any(axis=1)
    rows, cols = live(kh, H, Ho), live(kw, W, Wo)
    return [(i, j) for i in range(kh) if rows[i] for j in range(kw) if cols[j]]


def conv2d_array(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride: int = 1,
                 padding: int = 0, dilation: int = 1, groups: int = 1) -> np.ndarray:
    """Cross-correlation on raw arrays (no tape)."""
    B, C, H, W, O, Cg, kh, kw, Ho, Wo = _conv_geometry(x.shape, w.shape, stride, padding, dilation, groups)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    depthwise = Cg == 1 and O == C and groups == C
    Og = O // groups
    out = np.zeros((B, O, Ho, Wo)) if depthwise or groups > 1 else np.zeros((O, B, Ho, Wo))
    for i, j in _live_taps(kh, kw, H, W, Ho, Wo, stride, padding, dilation):
        xs = xp[_tap_slice(i, j, Ho, Wo, stride, dilation)]
        if depthwise:
            out += xs * w[:, 0, i, j][None, :, None, None]
        elif groups == 1:
            out += np.tensordot(w[:, :, i, j], xs, axes=([1], [1]))
        else:
            xg = xs.reshape(B, groups, Cg, Ho, Wo)
            wg = w[:, :, i, j].reshape(groups, Og, Cg)
            out += np.einsum("bgchw,goc->bgohw", xg, wg).reshape(B, O, Ho, Wo)
    if not depthwise and groups == 1:
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """2-d cross-correlation of a (B, C, H, W) input with (O, C/groups, kh, kw) weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    B, C, H, W, O, Cg, kh, kw, Ho, Wo = _conv_geometry(x.shape, w.shape, stride, padding, dilation, groups)
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {O} output channels")
    xd, wd = x.data, w.data
    y = conv2d_array(xd, wd, None if b is None else b.data, stride, padding, dilation, groups)
    depthwise = Cg == 1 and O == C and groups == C
    Og = O // groups
    taps = _live_taps(kh, kw, H, W, Ho, Wo, stride, padding, dilation)

    def backward(g):
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i, j in taps:
            sl = _tap_slice(i, j, Ho, Wo, stride, dilation)
            xs = xp[sl]
            if depthwise:
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xs)
                gxp[sl] += g * wd[:, 0, i, j][None, :, None, None]
            elif groups == 1:
                gw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                gxp[sl] += np.tensordot(g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            else:
                gg = g.reshape(B, groups, Og, Ho, Wo)
                xg = xs.reshape(B, groups, Cg, Ho, Wo)
                wg = wd[:, :, i, j].reshape(groups, Og, Cg)
                gw[:, :, i, j] = np.einsum("bgohw,bgchw->goc", gg, xg).reshape(O, Cg)
                gxp[sl] += np.einsum("bgohw,goc->bgchw", gg, wg).reshape(B, C, Ho, Wo)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(gx), gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return make_op(y, inputs, (lambda g: backward(g)[:2]) if b is None else backward, "conv2d")


# ------------------------------------------------------------ normalization

def normalize(x: Tensor, axes: Sequence[int], eps: float) -> Tensor:
    """``(x - mean) / sqrt(var + eps)`` with population statistics over ``axes``."""
    axes = tuple(a % x.ndim for a in axes)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_op(xhat, (x,), backward, "normalize")


def l1_normalize(x: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Divide by the absolute sum along ``axis`` (plus ``eps``)."""
    xd = x.data
    s = np.abs(xd).sum(axis=axis, keepdims=True) + eps
    y = xd / s

    def backward(g):
        dot = (g * xd).sum(axis=axis, keepdims=True)
        return (g / s - np.sign(xd) * dot / (s * s),)

    return make_op(y, (x,), backward, "l1_normalize")


def smoothed_cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against label-smoothed targets.

    Targets are ``1 - smoothing + smoothing/K`` on the true class and
    ``smoothing/K`` elsewhere.
    """
    if logits.ndim != 2:
        raise ShapeError(f"expected (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - lse
    target = np.full((n, k), smoothing / k)
    target[np.arange(n), labels] += 1.0 - smoothing
    loss = -(target * logp).sum() / n
    probs = np.exp(logp)

    def backward(g):
        return ((probs - target) * (g / n),)

    return make_op(np.asarray(loss), (logits,), backward, "smoothed_cross_entropy")


def tensors_finite(tensors: Iterable[Tensor]) -> bool:
    return all(t.isfinite() for t in tensors)
