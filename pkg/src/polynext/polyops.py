"""Activation-free building blocks.

Every nonlinearity here is a product of two learned projections. Blocks work on
the feature axis (axis 1), so ``PolyMLP`` and ``PolyHead`` accept both (N, d)
rows and (B, C, H, W) maps; the mixers take maps only.

``fusion="add"`` swaps each elementwise product for a sum. It exists for the
ablation that asks how much the multiplicative interaction matters.
"""

from __future__ import annotations

import math

import numpy as np

from .module import Linear, Module, depthwise
from .normalization import RunningRowSum, make_norm
from .tensor import (Tensor, add_scalar, flip, hadamard, int_pow, l1_normalize, matmul,
                     mul_along, param, reshape, sigmoid, transpose)

KAIMING_GAIN = math.sqrt(2.0)
HEAD_DIM = 32
FUSIONS = ("hadamard", "add")


def _fuse(a: Tensor, b: Tensor, fusion: str) -> Tensor:
    if fusion == "hadamard":
        return hadamard(a, b)
    if fusion == "add":
        return a + b
    raise ValueError(f"fusion must be one of {FUSIONS}, got {fusion!r}")


def _check_features(x: Tensor, d: int, who: str) -> None:
    if x.ndim < 2 or x.shape[1] != d:
        raise ValueError(f"{who}: expected {d} features on axis 1, got input {x.shape}")


# ------------------------------------------------------------------ PolyMLP

class PolyMLP(Module):
    """``W_o norm((W_a x + b_a) * (W_b x + b_b)) + b_o``."""

    def __init__(self, d: int, hidden: int, d_out: int, rng: np.random.Generator, *,
                 norm: str = "layernorm", spatial: tuple[int, ...] = (),
                 fusion: str = "hadamard", gain: float = KAIMING_GAIN):
        self.w_a = Linear(d, hidden, rng, gain)
        self.w_b = Linear(d, hidden, rng, gain)
        self.norm = make_norm(norm, hidden, spatial)
        self.w_o = Linear(hidden, d_out, rng, gain)
        self.fusion = fusion

    def __call__(self, x: Tensor, mode: str = "infer", update: bool = True) -> Tensor:
        return poly_mlp_forward(x, self, mode, update)


def poly_mlp_forward(x: Tensor, params: PolyMLP, mode: str = "infer", update: bool = True) -> Tensor:
    _check_features(x, params.w_a.d_in, "poly_mlp")
    m = _fuse(params.w_a(x), params.w_b(x), params.fusion)
    return params.w_o(params.norm(m, mode=mode, update=update))


class PolyHead(Module):
    """``W_o norm(W_a x + (W_a x) * (W_b x)) + b_o``: the linear path bypasses the product."""

    def __init__(self, d: int, hidden: int, classes: int, rng: np.random.Generator, *,
                 norm: str = "layernorm", fusion: str = "hadamard", gain: float = 1.0):
        self.w_a = Linear(d, hidden, rng, gain)
        self.w_b = Linear(d, hidden, rng, gain)
        self.norm = make_norm(norm, hidden, ())
        self.w_o = Linear(hidden, classes, rng, gain)
        self.fusion = fusion

    def __call__(self, x: Tensor, mode: str = "infer", update: bool = True) -> Tensor:
        return poly_head_forward(x, self, mode, update)


def poly_head_forward(x: Tensor, params: PolyHead, mode: str = "infer", update: bool = True) -> Tensor:
    _check_features(x, params.w_a.d_in, "poly_head")
    a = params.w_a(x)
    h = a + _fuse(a, params.w_b(x), params.fusion)
    return params.w_o(params.norm(h, mode=mode, update=update))


# ----------------------------------------------------------------- PolyConv

def channel_flip(x: Tensor) -> Tensor:
    """Reverse the channel order (axis 1)."""
    return flip(x, 1)


def coarse_kernel(stage: int) -> tuple[int, int]:
    """(kernel, dilation) of the coarse branch for a 1-based stage index."""
    if stage < 1:
        raise ValueError("stage index is 1-based")
    return (3, 2) if stage == 1 else (5, 2)


class PolyConv(Module):
    """Two depthwise branches fused by a product, one taken channel-reversed.

    ``stage`` is 1-based: the first stage uses a 3x3 dilated coarse branch,
    later stages a 5x5 one (9x9 reach).
    """

    def __init__(self, channels: int, hidden: int, stage: int, rng: np.random.Generator, *,
                 norm: str = "layernorm", spatial: tuple[int, ...] = (),
                 fusion: str = "hadamard", gain: float = KAIMING_GAIN):
        k, dil = coarse_kernel(stage)
        self.stage = stage
        self.w_in = Linear(channels, hidden, rng, gain)
        self.k_c = depthwise(hidden, k, rng, dilation=dil, gain=gain)
        self.k_f = depthwise(hidden, 3, rng, gain=gain)
        self.k = depthwise(hidden, 3, rng, gain=gain)
        self.w_out = Linear(hidden, channels, rng, gain)
        self.norm = make_norm(norm, channels, spatial)
        self.fusion = fusion

    def __call__(self, x: Tensor, mode: str = "infer", update: bool = True) -> Tensor:
        return poly_conv_forward(x, self, mode, update)


def poly_conv_core(x: Tensor, params: PolyConv) -> Tensor:
    """The fused map ``K_c(h) * flip(K_f(h))`` with ``h = W_in x``."""
    h = params.w_in(x)
    return _fuse(params.k_c(h), channel_flip(params.k_f(h)), params.fusion)


def poly_conv_forward(x: Tensor, params: PolyConv, mode: str = "infer", update: bool = True) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"poly_conv expects (B, C, H, W), got {x.shape}")
    _check_features(x, params.w_in.d_in, "poly_conv")
    y = params.w_out(params.k(poly_conv_core(x, params)))
    return params.norm(y, mode=mode, update=update)


# ----------------------------------------------------------------- PolyAttn

def attention_heads(channels: int) -> int:
    return max(1, math.ceil(channels / 64))


def scale_logit_init(head_dim: int = HEAD_DIM) -> float:
    """Logit whose sigmoid equals ``head_dim ** -0.5``."""
    s = head_dim ** -0.5
    return math.log(s / (1.0 - s))


def poly_kernel(scores: Tensor, s: Tensor | float, p: int, head_axis: int = 1) -> Tensor:
    """``(s * scores + 1) ** p`` using ``p - 1`` multiplications.

    ``s`` is a float or a per-head vector broadcast along ``head_axis``.
    """
    if isinstance(s, Tensor):
        scaled = mul_along(scores, s, (head_axis,))
    else:
        scaled = scores * float(s)
    return int_pow(add_scalar(scaled, 1.0), p)


class PolyAttn(Module):
    """Polynomial-kernel attention with a shared query/key projection.

    The LayerNorm variant divides each attention row by its absolute sum. The
    BatchNorm variant divides by a running row-sum estimate instead and adds a
    position-wise norm before the output projection, keeping inference free of
    per-sample statistics.
    """

    def __init__(self, channels: int, rng: np.random.Generator, *, p: int = 4,
                 norm: str = "layernorm", spatial: tuple[int, ...] = (),
                 head_dim: int = HEAD_DIM, eps: float = 1e-6, gain: float = 1.0):
        if p < 1:
            raise ValueError("polynomial degree p must be >= 1")
        self.heads = attention_heads(channels)
        self.head_dim = head_dim
        dim = self.heads * head_dim
        self.w_qk = Linear(channels, dim, rng, gain)
        self.w_v = Linear(channels, dim, rng, gain)
        self.dw_q = depthwise(dim, 3, rng, gain=gain)
        self.dw_k = depthwise(dim, 3, rng, gain=gain)
        self.dw_v = depthwise(dim, 3, rng, gain=gain)
        self.scale_logit = param(np.full(self.heads, scale_logit_init(head_dim)), no_decay=True)
        self.p = p
        self.eps = eps
        self.norm_kind = norm
        if norm == "polybn":
            if len(spatial) != 2:
                raise ValueError("the BatchNorm attention variant needs a fixed (H, W)")
            self.rowsum = RunningRowSum(self.heads, spatial[0] * spatial[1], eps=eps)
            self.out_norm = make_norm("polybn", dim, spatial)
        elif norm not in ("layernorm", "identity"):
            raise ValueError(f"unknown norm kind {norm!r}")
        self.w_out = Linear(dim, channels, rng, gain)

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim

    def __call__(self, x: Tensor, mode: str = "infer", update: bool = True) -> Tensor:
        return poly_attn_forward(x, self, mode, update)


def _to_tokens(t: Tensor, heads: int, head_dim: int) -> Tensor:
    B, _, H, W = t.shape
    return transpose(reshape(t, (B, heads, head_dim, H * W)), (0, 1, 3, 2))


def poly_attn_weights(x: Tensor, params: PolyAttn) -> tuple[Tensor, Tensor]:
    """Unnormalized weights ``A`` (B, heads, N, N) and values (B, heads, N, head_dim)."""
    qk = params.w_qk(x)
    q = _to_tokens(params.dw_q(qk), params.heads, params.head_dim)
    k = _to_tokens(params.dw_k(qk), params.heads, params.head_dim)
    v = _to_tokens(params.dw_v(params.w_v(x)), params.heads, params.head_dim)
    scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    return poly_kernel(scores, sigmoid(params.scale_logit), params.p), v


def poly_attn_forward(x: Tensor, params: PolyAttn, mode: str = "infer", update: bool = True) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"poly_attn expects (B, C, H, W), got {x.shape}")
    _check_features(x, params.w_qk.d_in, "poly_attn")
    B, _, H, W = x.shape
    a, v = poly_attn_weights(x, params)
    if params.norm_kind == "polybn":
        a_hat = params.rowsum(a, mode=mode, update=update)
    else:
        a_hat = l1_normalize(a, axis=-1, eps=params.eps)
    out = transpose(matmul(a_hat, v), (0, 1, 3, 2))
    out = reshape(out, (B, params.dim, H, W))
    if params.norm_kind == "polybn":
        out = params.out_norm(out, mode=mode, update=update)
    return params.w_out(out)
