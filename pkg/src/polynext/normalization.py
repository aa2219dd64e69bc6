"""LayerNorm and the polynomial-compatible normalizers.

``PolyBatchNorm`` reduces over batch and channel axes, one statistic per
spatial position, with a factorized affine (per-channel times per-position
scale, per-channel plus per-position shift). At inference it is an affine map
with fixed coefficients. ``RunningRowSum`` replaces per-sample attention row
normalization with a running per-(head, query) estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .module import Module
from .tensor import Tensor, add_along, mul_along, normalize, param

EPS = 1e-5
MOMENTUM = 0.1

MODES = ("train", "infer")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


class LayerNorm(Module):
    """Normalizes the feature axis (axis 1) of rows or maps."""

    def __init__(self, features: int, eps: float = EPS):
        if features < 1:
            raise ValueError("LayerNorm needs at least one feature")
        self.gamma = param(np.ones(features), no_decay=True)
        self.beta = param(np.zeros(features), no_decay=True)
        self.eps = eps

    def __call__(self, x: Tensor, mode: str = "infer", **_) -> Tensor:
        return layer_norm(x, self)


def layer_norm(x: Tensor, params: LayerNorm) -> Tensor:
    if x.ndim < 2 or x.shape[1] != params.gamma.shape[0]:
        raise ValueError(f"layer_norm: input {x.shape} does not match {params.gamma.shape[0]} features")
    y = normalize(x, (1,), params.eps)
    return add_along(mul_along(y, params.gamma, (1,)), params.beta, (1,))


class PolyBatchNorm(Module):
    """Per-position statistics over (batch, channel) with a factorized affine.

    ``spatial`` is the fixed spatial shape (``(H, W)`` for maps, ``()`` for
    rows); it binds the size of the per-position parameters and buffers.
    """

    def __init__(self, channels: int, spatial: tuple[int, ...], eps: float = EPS,
                 momentum: float = MOMENTUM):
        self.channels = channels
        self.spatial = tuple(spatial)
        self.gamma_c = param(np.ones(channels), no_decay=True)
        self.gamma_hw = param(np.ones(self.spatial), no_decay=True)
        self.beta_c = param(np.zeros(channels), no_decay=True)
        self.beta_hw = param(np.zeros(self.spatial), no_decay=True)
        self.running_mean = np.zeros(self.spatial)
        self.running_var = np.ones(self.spatial)
        self.eps = eps
        self.momentum = momentum

    def affine_param_count(self) -> int:
        return self.gamma_c.size + self.beta_c.size + self.gamma_hw.size + self.beta_hw.size

    def __call__(self, x: Tensor, mode: str = "infer", update: bool = True, **_) -> Tensor:
        return poly_bn_forward(x, self, mode, update)


def poly_bn_forward(x: Tensor, params: PolyBatchNorm, mode: str = "infer",
                    update: bool = True) -> Tensor:
    _check_mode(mode)
    if x.ndim < 2 or x.shape[1] != params.channels or x.shape[2:] != params.spatial:
        raise ValueError(f"poly_bn: input {x.shape} does not match channels={params.channels}, "
                         f"spatial={params.spatial}")
    pos = tuple(range(2, x.ndim))
    if mode == "train":
        if x.shape[0] * x.shape[1] < 2:
            raise ValueError("poly_bn in train mode needs at least two values per position")
        if update:
            m = params.momentum
            params.running_mean = np.asarray((1.0 - m) * params.running_mean + m * x.data.mean(axis=(0, 1)))
            params.running_var = np.asarray((1.0 - m) * params.running_var + m * x.data.var(axis=(0, 1)))
        y = normalize(x, (0, 1), params.eps)
    else:
        shift = Tensor._wrap(np.asarray(-params.running_mean))
        inv = Tensor._wrap(np.asarray(1.0 / np.sqrt(params.running_var + params.eps)))
        y = mul_along(add_along(x, shift, pos), inv, pos)
    y = mul_along(mul_along(y, params.gamma_c, (1,)), params.gamma_hw, pos)
    return add_along(add_along(y, params.beta_c, (1,)), params.beta_hw, pos)


@dataclass(frozen=True)
class FoldedAffine:
    """``y = scale * x + shift`` with per-(channel, position) coefficients."""

    scale: np.ndarray
    shift: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.shift


def fold_norm_to_affine(params: PolyBatchNorm) -> FoldedAffine:
    """Collapse inference-mode PolyBatchNorm into a per-position affine map."""
    extra = (slice(None),) + (None,) * len(params.spatial)
    gamma = params.gamma_c.data[extra] * params.gamma_hw.data[None]
    scale = gamma / np.sqrt(params.running_var + params.eps)[None]
    shift = (params.beta_c.data[extra] + params.beta_hw.data[None]) - scale * params.running_mean[None]
    return FoldedAffine(scale, shift)


class RunningRowSum(Module):
    """Attention normalizer dividing by a running row-sum estimate."""

    def __init__(self, heads: int, tokens: int, eps: float = 1e-6, momentum: float = MOMENTUM):
        self.gamma = param(np.ones((heads, tokens)), no_decay=True)
        # Unnormalized weights start near 1 per entry, so a row sums to about N.
        self.running_rowsum = np.full((heads, tokens), float(tokens))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, a: Tensor, mode: str = "infer", update: bool = True, **_) -> Tensor:
        return rowsum_norm_forward(a, self, mode, update)

    def multiplier(self) -> np.ndarray:
        """Per-(head, query) constant applied at inference."""
        return self.gamma.data / (self.running_rowsum + self.eps)


def rowsum_norm_forward(a: Tensor, params: RunningRowSum, mode: str = "infer",
                        update: bool = True) -> Tensor:
    _check_mode(mode)
    if a.ndim != 4 or a.shape[1:3] != params.gamma.shape or a.shape[2] != a.shape[3]:
        raise ValueError(f"rowsum_norm: attention {a.shape} does not match {params.gamma.shape}")
    if (a.data < 0).any():
        raise ValueError("rowsum_norm requires non-negative attention weights (use an even degree)")
    if mode == "train" and update:
        batch = a.data.sum(axis=3).mean(axis=0)
        m = params.momentum
        params.running_rowsum = (1.0 - m) * params.running_rowsum + m * batch
    inv = Tensor._wrap(1.0 / (params.running_rowsum + params.eps))
    return mul_along(mul_along(a, inv, (1, 2)), params.gamma, (1, 2))


def make_norm(kind: str, channels: int, spatial: tuple[int, ...]) -> Module:
    if kind == "layernorm":
        return LayerNorm(channels)
    if kind == "polybn":
        return PolyBatchNorm(channels, spatial)
    if kind == "identity":
        from .module import Identity
        return Identity()
    raise ValueError(f"unknown norm kind {kind!r}")
