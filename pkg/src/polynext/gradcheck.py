"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[int, tuple[int, ...]] | None  # (input position, element index)
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _scalar(f, xs) -> float:
    out = f(*xs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    v = float(out.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise FloatingPointError("function value is not finite")
    return v


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], step: float = 1e-4,
               tol: float = 1e-5, max_elements: int | None = None,
               rng: np.random.Generator | None = None, order: int = 4) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*x)`` with central differences.

    ``order`` 2 uses the two-point stencil, 4 the five-point stencil
    ``(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h``, whose O(h^4)
    truncation error allows a larger step and so less roundoff.

    Each tensor in ``x`` is perturbed in place and restored. Relative error per
    element is ``|a - b| / max(|a|, |b|, 1e-8)``. ``max_elements`` caps the
    number of elements checked per tensor (sampled with ``rng``).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    xs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
    try:
        with Tape() as tape:
            out = f(*xs)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
        if not out.isfinite():
            raise FloatingPointError("function value is not finite")
        grads = tape.backward(out)
        worst, worst_at, checked = 0.0, None, 0
        rng = rng or np.random.default_rng(0)
        for pos, t in enumerate(xs):
            analytic = grads.get(t, np.zeros_like(t.data))
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, max_elements, replace=False))
            for i in idx:
                orig = flat[i]

                def at(offset):
                    flat[i] = orig + offset
                    return _scalar(f, xs)

                d1 = at(step) - at(-step)
                if order == 2:
                    numeric = d1 / (2.0 * step)
                else:
                    numeric = (8.0 * d1 - (at(2 * step) - at(-2 * step))) / (12.0 * step)
                flat[i] = orig
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                checked += 1
                if err > worst or worst_at is None:
                    worst, worst_at = err, (pos, tuple(int(j) for j in np.unravel_index(i, t.shape)))
        return GradCheckReport(worst, worst_at, checked, tol)
    finally:
        for t, flag in zip(xs, flags):
            t.requires_grad = flag
