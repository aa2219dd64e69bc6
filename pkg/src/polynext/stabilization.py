"""Residual gating, two-input skips and regularization schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .module import Module
from .tensor import Tensor, index, make_op, mul_along, param, scalar_mul, sigmoid

SIGMOID_VARIANTS = ("standard", "large")


def sigmoid_scale_apply(x: Tensor, fx: Tensor, logit: Tensor) -> Tensor:
    """``x + sigmoid(logit) * fx`` with a 0-d ``logit``."""
    if x.shape != fx.shape:
        raise ValueError(f"sigmoid_scale_apply: shape mismatch {x.shape} vs {fx.shape}")
    return x + scalar_mul(sigmoid(logit), fx)


def init_sigmoid_logits(count: int, variant: str = "standard") -> np.ndarray:
    """Depth-indexed logits ``-i/2`` (``large`` shifts every entry by ``-0.5``)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if variant not in SIGMOID_VARIANTS:
        raise ValueError(f"variant must be one of {SIGMOID_VARIANTS}, got {variant!r}")
    logits = -0.5 * np.arange(count, dtype=np.float64)
    return logits - 0.5 if variant == "large" else logits


class SigmoidGates(Module):
    """One logit per sublayer slot of a cell, consumed positionally."""

    def __init__(self, count: int, variant: str = "standard"):
        self.logits = param(init_sigmoid_logits(count, variant), no_decay=True)

    def logit(self, i: int) -> Tensor:
        return index(self.logits, i)

    def scale(self, i: int) -> float:
        return float(1.0 / (1.0 + np.exp(-self.logits.data[i])))


class MultiInputSkip(Module):
    def __init__(self, channels: int, init: float = 1.0):
        self.s0 = param(np.full(channels, init), no_decay=True)
        self.s1 = param(np.full(channels, init), no_decay=True)

    def __call__(self, x_t2: Tensor, x_t1: Tensor) -> Tensor:
        return multi_input_skip_combine(x_t2, x_t1, self)


def multi_input_skip_combine(x_t2: Tensor, x_t1: Tensor, skip: MultiInputSkip) -> Tensor:
    """Per-channel ``s0 * x_t2 + s1 * x_t1``."""
    if x_t2.shape != x_t1.shape:
        raise ValueError(f"skip inputs differ in shape: {x_t2.shape} vs {x_t1.shape}")
    return mul_along(x_t2, skip.s0, (1,)) + mul_along(x_t1, skip.s1, (1,))


@dataclass(frozen=True)
class RegularizationSchedule:
    final_dropout: float = 0.0
    stochastic_depth_max: float = 0.0
    total_epochs: int = 1

    def __post_init__(self):
        for name in ("final_dropout", "stochastic_depth_max"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def dropout_rate_at(epoch: int, sched: RegularizationSchedule) -> float:
    """Linear ramp from 0 at the first epoch to ``final_dropout`` at the last.

    ``epoch == total_epochs`` (one past the last) is accepted and clamps to the
    final rate.
    """
    if not 0 <= epoch <= sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    frac = min(epoch / max(sched.total_epochs - 1, 1), 1.0)
    return sched.final_dropout * frac


def drop_path_rates(count: int, max_rate: float) -> np.ndarray:
    """Per-sublayer stochastic-depth rates, linear from 0 to ``max_rate``."""
    if count < 1:
        return np.zeros(0)
    return np.linspace(0.0, max_rate, count) if count > 1 else np.array([max_rate])


def stochastic_depth_gate(rate: float, training: bool, rng: np.random.Generator | None,
                          size: int | None = None) -> np.ndarray | float:
    """Per-sample multipliers: 0 for dropped, ``1/(1-rate)`` for kept.

    Returns the scalar 1.0 outside training or at rate 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return 1.0
    if rng is None:
        raise ValueError("training-mode stochastic depth needs an rng")
    keep = rng.random(size) >= rate
    return keep / (1.0 - rate)


def apply_sample_mask(x: Tensor, mask: np.ndarray | float) -> Tensor:
    """Scale each sample (axis 0) by a fixed per-sample factor."""
    if np.isscalar(mask):
        return x if mask == 1.0 else x * float(mask)
    mb = np.asarray(mask, dtype=np.float64).reshape((-1,) + (1,) * (x.ndim - 1))
    return make_op(x.data * mb, (x,), lambda g: (g * mb,), "sample_mask")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
