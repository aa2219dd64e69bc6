"""Invariant suites runnable without pytest (``polynext verify --suite ...``)."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .circuit import eval_circuit, verify_polynomial
from .folding import Sequential, export_circuit, fold_inference, fold_module
from .gradcheck import grad_check
from .model import ModelConfig, build_model, param_count, preset, set_norm_momentum
from .normalization import PolyBatchNorm, fold_norm_to_affine
from .polyops import PolyAttn, PolyConv, PolyMLP, poly_attn_weights, poly_conv_core, scale_logit_init
from .stabilization import init_sigmoid_logits
from .tensor import Tensor, hadamard, sum as tsum

Check = tuple[str, bool, str]


def third_difference(f: Callable[[float], np.ndarray], h: float = 0.5) -> float:
    """Relative size of the third central difference of ``f`` along t."""
    ys = [f(t * h) for t in (-2, -1, 0, 1, 2)]
    d3 = (ys[4] - 2 * ys[3] + 2 * ys[1] - ys[0]) / 2.0
    return float(np.abs(d3).max() / max(np.abs(np.stack(ys)).max(), 1e-300))


def calibrate(model, images: np.ndarray, batch_size: int | None = None) -> None:
    """Running statistics as the plain average over train-mode passes of ``images``."""
    batch_size = batch_size or len(images)
    for k, start in enumerate(range(0, len(images), batch_size)):
        set_norm_momentum(model, 1.0 / (k + 1))
        model(Tensor(images[start:start + batch_size]), "train")
    set_norm_momentum(model, 0.1)


def toy_bn_config(**kw) -> ModelConfig:
    base = dict(channels=(8, 16), cells=(1, 1), stacks=(1, 1), mixers=("polyconv", "polyattn"),
                norm="polybn", num_classes=3, resolution=16)
    base.update(kw)
    return ModelConfig(**base)


def suite_gradients(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    mlp = PolyMLP(8, 6, 4, rng)
    x = Tensor(rng.standard_normal((2, 8)))
    w = rng.standard_normal((2, 4))
    rep = grad_check(lambda x, *_: tsum(hadamard(mlp(x), Tensor(w))), [x] + mlp.parameters())
    out.append(("poly_mlp gradient", rep.passed, f"max rel err {rep.max_rel_error:.2e}"))
    return out


def suite_degree(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    mlp = PolyMLP(6, 5, 4, rng, norm="identity")
    conv = PolyConv(4, 4, 2, rng, norm="identity")
    worst_mlp = worst_conv = 0.0
    for _ in range(100):
        x0, v = rng.standard_normal((2, 6)), rng.standard_normal((2, 6))
        worst_mlp = max(worst_mlp, third_difference(lambda t: mlp(Tensor(x0 + t * v)).data))
        y0, u = rng.standard_normal((1, 4, 6, 6)), rng.standard_normal((1, 4, 6, 6))
        worst_conv = max(worst_conv, third_difference(lambda t: poly_conv_core(Tensor(y0 + t * u), conv).data))
    return [("poly_mlp degree 2 on lines", worst_mlp < 1e-9, f"{worst_mlp:.2e}"),
            ("poly_conv core degree 2 on lines", worst_conv < 1e-9, f"{worst_conv:.2e}")]


def suite_attention(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    attn = PolyAttn(64, rng)
    x = Tensor(rng.standard_normal((2, 64, 4, 4)))
    a, _ = poly_attn_weights(x, attn)
    s = 1.0 / (1.0 + math.exp(-scale_logit_init()))
    return [("attention weights non-negative", bool((a.data >= 0).all()), ""),
            ("attention scale init", abs(s - 32 ** -0.5) < 1e-12, f"{s:.15f}")]


def suite_folding(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    model = build_model(toy_bn_config(), seed)
    calibrate(model, rng.standard_normal((16, 3, 16, 16)))
    x = rng.standard_normal((20, 3, 16, 16))
    ref = model(Tensor(x)).data
    got = fold_inference(model)(x)
    err = float(np.abs(got - ref).max() / np.abs(ref).max())
    bn = PolyBatchNorm(4, (3, 3))
    bn.running_mean = rng.standard_normal((3, 3))
    bn.running_var = rng.random((3, 3)) + 0.5
    y = rng.standard_normal((5, 4, 3, 3))
    e2 = float(np.abs(bn(Tensor(y)).data - fold_norm_to_affine(bn).apply(y)).max())
    return [("fold_inference equivalence", err < 1e-9, f"{err:.2e}"),
            ("poly_bn affine collapse", e2 < 1e-12, f"{e2:.2e}")]


def suite_circuit(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    model = build_model(toy_bn_config(), seed)
    calibrate(model, rng.standard_normal((16, 3, 16, 16)))
    folded = fold_inference(model)
    circ = export_circuit(folded, (1, 3, 16, 16))
    cert = verify_polynomial(circ)
    x = rng.standard_normal((5, 3, 16, 16))
    err = float(np.abs(eval_circuit(circ, x.reshape(5, -1)) - folded(x)).max() / np.abs(folded(x)).max())
    degrees = []
    for L in range(1, 5):
        stack = Sequential([PolyMLP(2, 2, 2, rng, norm="polybn") for _ in range(L)])
        degrees.append(verify_polynomial(export_circuit(fold_module(stack), (1, 2))).max_degree)
    return [("circuit certificate", cert.ok, f"{cert.node_count} nodes, degree {cert.max_degree}"),
            ("circuit equivalence", err < 1e-6, f"{err:.2e}"),
            ("degree 2^L", degrees == [2, 4, 8, 16], str(degrees))]


def suite_architecture(seed: int = 0) -> list[Check]:
    out = []
    for name, target in (("cpolynext-t", 6.4e6), ("cpolynext-s", 26e6), ("apolynext-t", 6.5e6),
                         ("apolynext-s", 26e6)):
        n = param_count(build_model(preset(name), seed))
        dev = n / target - 1
        out.append((f"{name} parameters", abs(dev) <= 0.02, f"{n / 1e6:.2f}M ({dev:+.1%})"))
    s = 1.0 / (1.0 + np.exp(-init_sigmoid_logits(3)))
    out.append(("sigmoid init schedule", bool(np.allclose(s, [0.5, 0.3775, 0.2689], atol=1e-4)), str(s.round(4))))
    return out


SUITES: dict[str, Callable[[int], list[Check]]] = {
    "gradients": suite_gradients,
    "degree": suite_degree,
    "attention": suite_attention,
    "folding": suite_folding,
    "circuit": suite_circuit,
    "architecture": suite_architecture,
}


def run_suite(name: str, seed: int = 0) -> list[Check]:
    if name == "all":
        return [c for fn in SUITES.values() for c in fn(seed)]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    return SUITES[name](seed)
