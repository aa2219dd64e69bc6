"""PolyNeXt assembly: stem, staged cells with two-input skips, and head."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .module import Conv2d, Module
from .normalization import LayerNorm, PolyBatchNorm, RunningRowSum, make_norm
from .polyops import KAIMING_GAIN, PolyAttn, PolyConv, PolyHead, PolyMLP, coarse_kernel
from .stabilization import (MultiInputSkip, SigmoidGates, apply_sample_mask, drop_path_rates,
                            dropout, multi_input_skip_combine, stochastic_depth_gate)
from .tensor import Tensor, mean, scalar_mul, sigmoid

MIXERS = ("polyconv", "polyattn")
NORMS = ("layernorm", "polybn")
STEM_KERNEL, STEM_STRIDE, STEM_PAD = 7, 4, 3


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of a PolyNeXt variant.

    Per-stage tuples (``channels``, ``cells``, ``stacks``, ``mixers``) share
    one length, the stage count. ``mlp_ratios``/``conv_ratios`` default to
    1.0 for the first two stages and 0.875/0.75 after; ``head_hidden``
    defaults to the last stage width.
    """

    channels: tuple[int, ...]
    cells: tuple[int, ...]
    stacks: tuple[int, ...]
    mixers: tuple[str, ...] = ()
    norm: str = "layernorm"
    num_classes: int = 1000
    resolution: int = 224
    in_channels: int = 3
    sigmoid_init: str = "standard"
    sigmoid_scale: bool = True
    head_hidden: int | None = None
    mlp_ratios: tuple[float, ...] = ()
    conv_ratios: tuple[float, ...] = ()
    attn_degree: int = 4
    fusion: str = "hadamard"
    name: str = "custom"

    def __post_init__(self):
        n = len(self.channels)
        fill = {
            "mixers": ("polyconv",) * n,
            "mlp_ratios": tuple(1.0 if s < 2 else 0.875 for s in range(n)),
            "conv_ratios": tuple(1.0 if s < 2 else 0.75 for s in range(n)),
        }
        for key, default in fill.items():
            if not getattr(self, key):
                object.__setattr__(self, key, default)
        for key in ("channels", "cells", "stacks", "mixers", "mlp_ratios", "conv_ratios"):
            object.__setattr__(self, key, tuple(getattr(self, key)))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    @property
    def max_stacks(self) -> int:
        return max(self.stacks)

    @property
    def d_head(self) -> int:
        return self.head_hidden or self.channels[-1]

    def stage_resolution(self, stage: int) -> int:
        """Spatial size of 0-based ``stage``: ``resolution / 2**(stage + 2)``."""
        return self.resolution // 2 ** (stage + 2)

    def mlp_hidden(self, stage: int) -> int:
        return math.ceil(self.mlp_ratios[stage] * self.channels[stage])

    def conv_hidden(self, stage: int) -> int:
        return math.ceil(self.conv_ratios[stage] * self.channels[stage])

    def validate(self) -> None:
        n = self.num_stages
        if not 1 <= n <= 4:
            raise ValueError(f"1 to 4 stages supported, got {n}")
        for key in ("cells", "stacks", "mixers", "mlp_ratios", "conv_ratios"):
            if len(getattr(self, key)) != n:
                raise ValueError(f"{key} must have one entry per stage ({n})")
        counts = self.channels + self.cells + self.stacks + (self.num_classes, self.in_channels)
        if min(counts) < 1 or min(self.mlp_ratios + self.conv_ratios) <= 0:
            raise ValueError("all counts and ratios must be positive")
        bad = [m for m in self.mixers if m not in MIXERS]
        if bad:
            raise ValueError(f"unknown mixer kinds {bad}; expected {MIXERS}")
        first_attn = self.mixers.index("polyattn") if "polyattn" in self.mixers else n
        if any(m == "polyconv" for m in self.mixers[first_attn:]):
            raise ValueError(f"invalid mixer/stage combination {self.mixers}: "
                             "attention stages must follow all convolution stages")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.attn_degree < 1:
            raise ValueError("attn_degree must be >= 1")
        if self.norm == "polybn" and "polyattn" in self.mixers and self.attn_degree % 2:
            raise ValueError("the BatchNorm attention variant needs an even degree")
        if self.resolution % 2 ** (n + 1) or self.stage_resolution(n - 1) < 1:
            raise ValueError(f"resolution {self.resolution} is not divisible by {2 ** (n + 1)}")
        if self.fusion not in ("hadamard", "add"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.sigmoid_init not in ("standard", "large"):
            raise ValueError(f"unknown sigmoid_init {self.sigmoid_init!r}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))

_SIZES = {
    "t": dict(channels=(48, 96, 192, 288), cells=(2, 2, 6, 2), stacks=(3, 3, 3, 3)),
    "s": dict(channels=(72, 144, 288, 432), cells=(3, 3, 8, 3), stacks=(3, 4, 4, 4)),
    "b": dict(channels=(84, 168, 336, 504), cells=(3, 5, 10, 3), stacks=(4, 4, 4, 4)),
    "l": dict(channels=(96, 192, 384, 576), cells=(3, 6, 12, 3), stacks=(4, 4, 4, 4)),
}
_LR = dict(channels=(72, 144, 288), cells=(2, 3, 3), stacks=(3, 3, 3), resolution=32, num_classes=10)
_DESK_LR = dict(channels=(24, 48, 96), cells=(1, 2, 2), stacks=(2, 2, 2), resolution=32, num_classes=10)


def preset(name: str) -> ModelConfig:
    """Named configurations such as ``cpolynext-t``, ``apolynext-s-bn`` or ``desk-lr``."""
    key = name.lower()
    norm = "layernorm"
    if key.endswith("-bn"):
        key, norm = key[:-3], "polybn"
    if key in ("cpolynext-lr", "lr"):
        return ModelConfig(**_LR, norm=norm, name=name)
    if key == "desk-lr":
        return ModelConfig(**_DESK_LR, norm=norm, name=name)
    family, _, size = key.partition("-")
    if family not in ("cpolynext", "apolynext") or size not in _SIZES:
        raise KeyError(f"unknown preset {name!r}; see PRESETS")
    mixers = ("polyconv",) * 4 if family == "cpolynext" else ("polyconv", "polyconv", "polyattn", "polyattn")
    init = "large" if size == "l" else "standard"
    return ModelConfig(**_SIZES[size], mixers=mixers, norm=norm, sigmoid_init=init, name=name)


PRESETS = tuple(f"{fam}-{s}{bn}" for fam in ("cpolynext", "apolynext") for s in "tsbl" for bn in ("", "-bn")) \
    + ("cpolynext-lr", "cpolynext-lr-bn", "desk-lr", "desk-lr-bn")


# ------------------------------------------------------------------- modules

class Cell(Module):
    def __init__(self, cfg: ModelConfig, stage: int, rng: np.random.Generator):
        C = cfg.channels[stage]
        r = cfg.stage_resolution(stage)
        spatial = (r, r)
        norm = cfg.norm
        self.skip = MultiInputSkip(C)
        self.pre_norm = make_norm(norm, C, spatial)
        self.gates = SigmoidGates(2 * cfg.max_stacks, cfg.sigmoid_init)
        self.mixers: list[Module] = []
        self.mlps: list[PolyMLP] = []
        for _ in range(cfg.stacks[stage]):
            if cfg.mixers[stage] == "polyconv":
                mixer = PolyConv(C, cfg.conv_hidden(stage), stage + 1, rng, norm=norm,
                                 spatial=spatial, fusion=cfg.fusion)
            else:
                mixer = PolyAttn(C, rng, p=cfg.attn_degree, norm=norm, spatial=spatial)
            self.mixers.append(mixer)
            self.mlps.append(PolyMLP(C, cfg.mlp_hidden(stage), C, rng, norm=norm,
                                     spatial=spatial, fusion=cfg.fusion))
        self.gated = cfg.sigmoid_scale

    @property
    def num_sublayers(self) -> int:
        return 2 * len(self.mixers)

    def sublayers(self):
        """(slot, module) pairs in execution order."""
        for j, (mixer, mlp) in enumerate(zip(self.mixers, self.mlps)):
            yield 2 * j, mixer
            yield 2 * j + 1, mlp


class DownsamplePair(Module):
    """Independent stride-2 convolutions for the two skip paths."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv_m2 = Conv2d(c_in, c_out, 3, rng, stride=2, padding=1, gain=KAIMING_GAIN)
        self.conv_m1 = Conv2d(c_in, c_out, 3, rng, stride=2, padding=1, gain=KAIMING_GAIN)


class Stage(Module):
    def __init__(self, cfg: ModelConfig, stage: int, rng: np.random.Generator):
        self.downsample = DownsamplePair(cfg.channels[stage - 1], cfg.channels[stage], rng) if stage else None
        self.cells = [Cell(cfg, stage, rng) for _ in range(cfg.cells[stage])]


class PolyNeXtModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        self.stem = Conv2d(cfg.in_channels, cfg.channels[0], STEM_KERNEL, rng,
                           stride=STEM_STRIDE, padding=STEM_PAD)
        self.stages = [Stage(cfg, s, rng) for s in range(cfg.num_stages)]
        self.head_norm = make_norm(cfg.norm, cfg.channels[-1], ())
        self.head = PolyHead(cfg.channels[-1], cfg.d_head, cfg.num_classes, rng, norm=cfg.norm,
                             fusion=cfg.fusion)

    def cells(self) -> list[Cell]:
        return [c for st in self.stages for c in st.cells]

    def num_sublayers(self) -> int:
        return sum(c.num_sublayers for c in self.cells())

    def __call__(self, x: Tensor, mode: str = "infer", **kw) -> Tensor:
        return model_forward(x, self, mode, **kw)


def build_model(config: ModelConfig, seed: int = 0) -> PolyNeXtModel:
    return PolyNeXtModel(config, np.random.default_rng(seed))


# ------------------------------------------------------------------- forward

@dataclass
class ForwardContext:
    mode: str = "infer"
    rng: np.random.Generator | None = None
    dropout: float = 0.0
    drop_path: np.ndarray | None = None  # per-sublayer rates, network order
    update_stats: bool = True
    _sublayer: int = field(default=0, repr=False)

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def next_drop_rate(self) -> float:
        i = self._sublayer
        self._sublayer += 1
        if self.drop_path is None or not self.training:
            return 0.0
        return float(self.drop_path[i])


def stem_forward(x: Tensor, model: PolyNeXtModel) -> tuple[Tensor, Tensor]:
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (B, {cfg.in_channels}, H, W) input, got {x.shape}")
    if x.shape[2] < 2 ** (cfg.num_stages + 1) or x.shape[3] < 2 ** (cfg.num_stages + 1):
        raise ValueError(f"input {x.shape[2]}x{x.shape[3]} too small for {cfg.num_stages} stages")
    s = model.stem(x)
    return s, s


def downsample_pair(x_m2: Tensor, x_m1: Tensor, pair: DownsamplePair) -> tuple[Tensor, Tensor]:
    if x_m2.shape != x_m1.shape:
        raise ValueError(f"skip paths differ in shape: {x_m2.shape} vs {x_m1.shape}")
    return pair.conv_m2(x_m2), pair.conv_m1(x_m1)


def _residual(y: Tensor, fx: Tensor, cell: Cell, slot: int, ctx: ForwardContext) -> Tensor:
    if cell.gated:
        fx = scalar_mul(sigmoid(cell.gates.logit(slot)), fx)
    rate = ctx.next_drop_rate()
    if rate > 0.0:
        fx = apply_sample_mask(fx, stochastic_depth_gate(rate, True, ctx.rng, y.shape[0]))
    return y + fx


def cell_forward(x_m2: Tensor, x_m1: Tensor, cell: Cell, mode: str = "infer",
                 ctx: ForwardContext | None = None) -> Tensor:
    ctx = ctx or ForwardContext(mode=mode)
    upd = ctx.update_stats
    y = cell.pre_norm(multi_input_skip_combine(x_m2, x_m1, cell.skip), mode=ctx.mode, update=upd)
    for slot, sub in cell.sublayers():
        fx = sub(y, mode=ctx.mode, update=upd)
        if isinstance(sub, PolyMLP):
            fx = dropout(fx, ctx.dropout, ctx.training, ctx.rng)
        y = _residual(y, fx, cell, slot, ctx)
    return y


def model_forward(x: Tensor, model: PolyNeXtModel, mode: str = "infer", *,
                  rng: np.random.Generator | None = None, dropout_rate: float = 0.0,
                  drop_path: float = 0.0, update_stats: bool = True,
                  return_stages: bool = False):
    """Logits for a (B, C, H, W) batch.

    ``drop_path`` is the stochastic-depth rate of the last sublayer; earlier
    sublayers ramp linearly from zero. Both regularizers act in train mode only.
    With ``return_stages`` the per-stage output maps are returned as well.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = model.config
    if cfg.norm == "polybn" and x.shape[2:] != (cfg.resolution, cfg.resolution):
        raise ValueError(f"input {x.shape[2:]} does not match the bound resolution {cfg.resolution}")
    rates = drop_path_rates(model.num_sublayers(), drop_path) if drop_path > 0 else None
    ctx = ForwardContext(mode, rng, dropout_rate, rates, update_stats)
    x_m2, x_m1 = stem_forward(x, model)
    stages = []
    for st in model.stages:
        if st.downsample is not None:
            x_m2, x_m1 = downsample_pair(x_m2, x_m1, st.downsample)
        for cell in st.cells:
            x_m2, x_m1 = x_m1, cell_forward(x_m2, x_m1, cell, ctx=ctx)
        stages.append(x_m1)
    pooled = mean(x_m1, axis=(2, 3))
    h = model.head_norm(pooled, mode=mode, update=update_stats)
    h = dropout(h, dropout_rate, ctx.training, rng)
    logits = model.head(h, mode=mode, update=update_stats)
    return (logits, stages) if return_stages else logits


# ------------------------------------------------------------------ analysis

def param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def set_norm_momentum(model: Module, momentum: float) -> None:
    """Set the running-statistics momentum of every PolyBatchNorm and RunningRowSum."""
    for m in iter_modules(model):
        if isinstance(m, (PolyBatchNorm, RunningRowSum)):
            m.momentum = momentum


def iter_modules(model: Module):
    return (m for _, m in named_modules(model))


def named_modules(model: Module, prefix: str = ""):
    yield prefix.rstrip("."), model
    for name, value in vars(model).items():
        if isinstance(value, Module):
            yield from named_modules(value, f"{prefix}{name}.")
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    yield from named_modules(item, f"{prefix}{name}.{i}.")


def flops_estimate(model: PolyNeXtModel, resolution: int | None = None) -> int:
    """Multiply-accumulate count of one image's forward pass.

    Convolutions count ``O*H'*W'*(C/g)*kh*kw``, projections ``m*k*n``; attention
    adds ``2*N^2*D`` for the two token products plus ``heads*N^2*p`` for the
    kernel. Elementwise products and norms are not counted.
    """
    cfg = model.config
    res = resolution or cfg.resolution
    r = res // STEM_STRIDE
    macs = cfg.channels[0] * r * r * cfg.in_channels * STEM_KERNEL ** 2
    for s, st in enumerate(model.stages):
        C = cfg.channels[s]
        if s:
            r = (r - 1) // 2 + 1
            macs += 2 * C * r * r * cfg.channels[s - 1] * 9
        hw = r * r
        for cell in st.cells:
            for mixer, mlp in zip(cell.mixers, cell.mlps):
                h = mlp.w_a.d_out
                macs += hw * (2 * C * h + h * C)
                if isinstance(mixer, PolyConv):
                    ch = mixer.w_in.d_out
                    k, _ = coarse_kernel(mixer.stage)
                    macs += hw * (2 * C * ch + ch * (k * k + 18))
                else:
                    d = mixer.dim
                    macs += hw * (3 * C * d + 27 * d) + 2 * hw * hw * d + mixer.heads * hw * hw * mixer.p
    C, dh = cfg.channels[-1], cfg.d_head
    macs += 2 * C * dh + dh * cfg.num_classes
    return int(macs)


def all_layernorms(model: Module) -> list[str]:
    return [n for n, m in named_modules(model) if isinstance(m, LayerNorm)]
