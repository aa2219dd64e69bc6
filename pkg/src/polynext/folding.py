"""Inference folding and lowering to arithmetic circuits.

Folding turns a trained BatchNorm-variant network into a fixed polynomial map:
residual gates are absorbed into the projection ending each sublayer, every
``PolyBatchNorm`` becomes a per-position affine map and every running row-sum
normalizer becomes a constant per-(head, query) multiplier.

The folded forward is written once against a small backend interface. The
numpy backend computes values; the circuit backend emits ADD/MUL/CONST nodes
for the same sequence of operations.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .circuit import DEFAULT_MAX_NODES, ArithmeticCircuit, CircuitBuilder, CircuitTooLarge
from .model import PolyNeXtModel, flops_estimate
from .module import Conv2d, Identity, Linear, Module
from .normalization import LayerNorm, PolyBatchNorm, RunningRowSum, fold_norm_to_affine
from .polyops import PolyAttn, PolyConv, PolyHead, PolyMLP
from .tensor import conv2d_array


class NotPolynomialFoldable(ValueError):
    """Raised when a network holds per-sample normalization."""

    def __init__(self, offenders: list[str]):
        self.offenders = offenders
        super().__init__("not polynomial-foldable; per-sample normalization in: " + ", ".join(offenders))


class AffineMap(Module):
    """Fixed ``x * scale + shift``; coefficients broadcast over the batch axis."""

    def __init__(self, scale: np.ndarray, shift: np.ndarray):
        self.scale = np.asarray(scale, dtype=np.float64)
        self.shift = np.asarray(shift, dtype=np.float64)


class RowScale(Module):
    """Constant per-(head, query) multiplier on attention weights."""

    def __init__(self, multiplier: np.ndarray):
        self.multiplier = np.asarray(multiplier, dtype=np.float64)


class Sequential(Module):
    """Plain composition, used to stack blocks in tests and scripts."""

    def __init__(self, layers: list[Module]):
        self.layers = list(layers)


# ------------------------------------------------------------------ folding

def _scale_output(sub: Module, s: float) -> None:
    if isinstance(sub, PolyMLP):
        proj = sub.w_o
    elif isinstance(sub, PolyAttn):
        proj = sub.w_out
    elif isinstance(sub, PolyConv):
        norm = sub.norm
        if isinstance(norm, LayerNorm):
            norm.gamma.data = norm.gamma.data * s
            norm.beta.data = norm.beta.data * s
            return
        if isinstance(norm, PolyBatchNorm):
            for p in (norm.gamma_c, norm.beta_c, norm.beta_hw):
                p.data = p.data * s
            return
        proj = sub.w_out
    else:
        raise TypeError(f"sublayer {type(sub).__name__} has no final projection to absorb a gate")
    proj.weight.data = proj.weight.data * s
    if proj.bias is not None:
        proj.bias.data = proj.bias.data * s


def fold_sigmoid_scale(model: PolyNeXtModel) -> PolyNeXtModel:
    """Copy of ``model`` with each gate absorbed into its sublayer's final projection."""
    out = copy.deepcopy(model)
    for cell in out.cells():
        if not cell.gated:
            continue
        for slot, sub in cell.sublayers():
            _scale_output(sub, cell.gates.scale(slot))
        cell.gated = False
    return out


def _replace_children(m: Module, prefix: str, offenders: list[str]) -> None:
    for name, value in list(vars(m).items()):
        items = list(enumerate(value)) if isinstance(value, list) else [(None, value)]
        for i, child in items:
            if not isinstance(child, Module):
                continue
            path = f"{prefix}{name}" + ("" if i is None else f".{i}")
            if isinstance(child, PolyBatchNorm):
                f = fold_norm_to_affine(child)
                new = AffineMap(f.scale, f.shift)
            elif isinstance(child, RunningRowSum):
                new = RowScale(child.multiplier())
            else:
                if isinstance(child, LayerNorm):
                    offenders.append(path)
                elif isinstance(child, PolyAttn) and child.norm_kind != "polybn":
                    offenders.append(path + " (row-wise l1 attention normalization)")
                _replace_children(child, path + ".", offenders)
                continue
            if i is None:
                setattr(m, name, new)
            else:
                value[i] = new


def fold_module(module: Module) -> Module:
    """Copy of ``module`` with every running-statistics normalizer made constant."""
    out = copy.deepcopy(module)
    offenders: list[str] = []
    _replace_children(out, "", offenders)
    if isinstance(out, LayerNorm):
        offenders.insert(0, "<root>")
    if offenders:
        raise NotPolynomialFoldable(offenders)
    return out


@dataclass
class FoldedModel:
    module: Module
    resolution: int | None = None

    def __call__(self, x, backend=None):
        return folded_forward(self.module, x, backend or NumpyBackend())


def fold_inference(model: PolyNeXtModel) -> FoldedModel:
    """Fold gates and running statistics of a BatchNorm-variant model."""
    fold_module(model)  # raises with every offending layer named
    return FoldedModel(fold_module(fold_sigmoid_scale(model)), model.config.resolution)


# ----------------------------------------------------------------- backends

def _bshape(coef: np.ndarray, ndim: int) -> np.ndarray:
    """Align per-feature coefficients (feature axis first) with a batched value."""
    coef = np.asarray(coef)
    return coef.reshape((1,) + coef.shape + (1,) * (ndim - 1 - coef.ndim))


class NumpyBackend:
    def input(self, x):
        return np.asarray(x, dtype=np.float64)

    def linear(self, x, w, b):
        y = x @ w.T if x.ndim == 2 else np.moveaxis(np.moveaxis(x, 1, -1) @ w.T, -1, 1)
        return y if b is None else y + _bshape(b, x.ndim)

    def conv(self, x, w, b, stride, padding, dilation, groups):
        return conv2d_array(x, w, b, stride, padding, dilation, groups)

    def add(self, x, y):
        return x + y

    def mul(self, x, y):
        return x * y

    def affine(self, x, scale, shift=None):
        y = x * _bshape(scale, x.ndim)
        return y if shift is None else y + _bshape(shift, x.ndim)

    def matmul(self, a, b):
        return a @ b

    def mean_spatial(self, x):
        return x.mean(axis=(2, 3))


class CircuitBackend:
    """Emits nodes; values are integer arrays of node ids."""

    def __init__(self, builder: CircuitBuilder):
        self.cb = builder

    def input(self, shape):
        return self.cb.inputs(shape)

    def linear(self, x, w, b):
        cw = self.cb.const(w)  # (O, C)
        xe = np.expand_dims(x, 1)  # (B, 1, C, ...)
        coef = cw.reshape((1,) + cw.shape + (1,) * (x.ndim - 2))
        terms = self.cb.mul(coef, xe)  # (B, O, C, ...)
        acc = self.cb.sum_fold(terms, axis=2)
        return acc if b is None else self.cb.add(acc, _bshape(self.cb.const(b), x.ndim))

    def conv(self, x, w, b, stride, padding, dilation, groups):
        B, C, H, W = x.shape
        O, Cg, kh, kw = w.shape
        Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
        Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-1)
        Og = O // groups
        chan = (np.arange(O) // Og) * Cg  # first input channel of each output's group
        cw = self.cb.const(w)
        terms, valid = [], []
        for c in range(Cg):
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, chan + c,
                            i * dilation:i * dilation + stride * (Ho - 1) + 1:stride,
                            j * dilation:j * dilation + stride * (Wo - 1) + 1:stride]
                    ok = xs >= 0
                    t = np.full(xs.shape, -1, np.int64)
                    coef = np.broadcast_to(cw[:, c, i, j][None, :, None, None], xs.shape)
                    if ok.any():
                        t[ok] = self.cb.mul(coef[ok], xs[ok])
                    terms.append(t)
                    valid.append(ok)
        acc = self.cb.masked_fold(np.stack(terms, -1), np.stack(valid, -1))
        return acc if b is None else self.cb.add(acc, _bshape(self.cb.const(b), 4))

    def add(self, x, y):
        return self.cb.add(x, y)

    def mul(self, x, y):
        return self.cb.mul(x, y)

    def affine(self, x, scale, shift=None):
        y = self.cb.mul(x, _bshape(self.cb.const(scale), x.ndim))
        return y if shift is None else self.cb.add(y, _bshape(self.cb.const(shift), x.ndim))

    def matmul(self, a, b):
        bt = np.swapaxes(b, -1, -2)
        terms = self.cb.mul(a[..., :, None, :], bt[..., None, :, :])
        return self.cb.sum_fold(terms, axis=-1)

    def mean_spatial(self, x):
        B, C, H, W = x.shape
        total = self.cb.sum_fold(x.reshape(B, C, H * W), axis=-1)
        return self.cb.mul(total, self.cb.const(np.full((1, 1), 1.0 / (H * W))))


# ---------------------------------------------------------- folded forward

def _lin(be, x, m: Linear):
    return be.linear(x, m.weight.data, None if m.bias is None else m.bias.data)


def _conv(be, x, m: Conv2d):
    return be.conv(x, m.weight.data, None if m.bias is None else m.bias.data,
                   m.stride, m.padding, m.dilation, m.groups)


def _norm(be, x, m: Module):
    if isinstance(m, AffineMap):
        return be.affine(x, m.scale, m.shift)
    if isinstance(m, Identity):
        return x
    raise NotPolynomialFoldable([type(m).__name__])


def _fuse(be, a, b, fusion):
    return be.mul(a, b) if fusion == "hadamard" else be.add(a, b)


def _tokens(t, heads, head_dim):
    B, _, H, W = t.shape
    return t.reshape(B, heads, head_dim, H * W).transpose(0, 1, 3, 2)


def _attn(be, x, m: PolyAttn):
    B, _, H, W = x.shape
    qk = _lin(be, x, m.w_qk)
    q = _tokens(_conv(be, qk, m.dw_q), m.heads, m.head_dim)
    k = _tokens(_conv(be, qk, m.dw_k), m.heads, m.head_dim)
    v = _tokens(_conv(be, _lin(be, x, m.w_v), m.dw_v), m.heads, m.head_dim)
    s = 1.0 / (1.0 + np.exp(-m.scale_logit.data))
    base = be.affine(be.matmul(q, k.transpose(0, 1, 3, 2)), s, np.ones_like(s))
    a = base
    for _ in range(m.p - 1):
        a = be.mul(a, base)
    if not isinstance(getattr(m, "rowsum", None), RowScale):
        raise NotPolynomialFoldable(["attention row normalizer"])
    a = be.affine(a, m.rowsum.multiplier)
    out = be.matmul(a, v).transpose(0, 1, 3, 2).reshape(B, m.dim, H, W)
    return _lin(be, _norm(be, out, m.out_norm), m.w_out)


def _apply(be, x, m: Module):
    if isinstance(m, PolyMLP):
        return _lin(be, _norm(be, _fuse(be, _lin(be, x, m.w_a), _lin(be, x, m.w_b), m.fusion), m.norm), m.w_o)
    if isinstance(m, PolyHead):
        a = _lin(be, x, m.w_a)
        return _lin(be, _norm(be, be.add(a, _fuse(be, a, _lin(be, x, m.w_b), m.fusion)), m.norm), m.w_o)
    if isinstance(m, PolyConv):
        h = _lin(be, x, m.w_in)
        core = _fuse(be, _conv(be, h, m.k_c), _conv(be, h, m.k_f)[:, ::-1], m.fusion)
        return _norm(be, _lin(be, _conv(be, core, m.k), m.w_out), m.norm)
    if isinstance(m, PolyAttn):
        return _attn(be, x, m)
    if isinstance(m, (AffineMap, Identity)):
        return _norm(be, x, m)
    if isinstance(m, Linear):
        return _lin(be, x, m)
    if isinstance(m, Conv2d):
        return _conv(be, x, m)
    if isinstance(m, Sequential):
        for layer in m.layers:
            x = _apply(be, x, layer)
        return x
    if isinstance(m, PolyNeXtModel):
        return _model(be, x, m)
    raise NotPolynomialFoldable([type(m).__name__])


def _model(be, x, model: PolyNeXtModel):
    x_m2 = x_m1 = _conv(be, x, model.stem)
    for st in model.stages:
        if st.downsample is not None:
            x_m2, x_m1 = _conv(be, x_m2, st.downsample.conv_m2), _conv(be, x_m1, st.downsample.conv_m1)
        for cell in st.cells:
            if cell.gated:
                raise NotPolynomialFoldable(["unfolded residual gate"])
            y = be.add(be.affine(x_m2, cell.skip.s0.data), be.affine(x_m1, cell.skip.s1.data))
            y = _norm(be, y, cell.pre_norm)
            for _, sub in cell.sublayers():
                y = be.add(y, _apply(be, y, sub))
            x_m2, x_m1 = x_m1, y
    h = _norm(be, be.mean_spatial(x_m1), model.head_norm)
    return _apply(be, h, model.head)


def folded_forward(module: Module, x, backend=None):
    """Run a folded module on raw values (numpy) or node ids (circuit)."""
    be = backend or NumpyBackend()
    return _apply(be, x, module)


# ------------------------------------------------------------------ export

def estimate_nodes(folded: FoldedModel | Module, input_shape) -> int:
    """Rough node count: about two nodes per multiply-accumulate."""
    module = folded.module if isinstance(folded, FoldedModel) else folded
    if isinstance(module, PolyNeXtModel):
        batch = input_shape[0] if len(input_shape) == 4 else 1
        return 2 * batch * flops_estimate(module, input_shape[-1])
    return 0


def export_circuit(folded: FoldedModel | Module, input_shape, max_nodes: int = DEFAULT_MAX_NODES
                   ) -> ArithmeticCircuit:
    """Lower a folded module into an ADD/MUL circuit; outputs are flattened in C order.

    ``input_shape`` includes the batch axis. Inputs are numbered in C order.
    """
    module = folded.module if isinstance(folded, FoldedModel) else folded
    est = estimate_nodes(module, input_shape)
    if est > max_nodes:
        raise CircuitTooLarge(f"estimated {est:,} nodes exceeds max_nodes={max_nodes:,}")
    cb = CircuitBuilder(max_nodes=max_nodes)
    be = CircuitBackend(cb)
    out = _apply(be, be.input(tuple(input_shape)), module)
    return cb.build(out)
