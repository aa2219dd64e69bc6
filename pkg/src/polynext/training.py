"""AdamW training loop with cosine schedule, label smoothing and weight EMA."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .data import DatasetSource
from .model import ModelConfig, PolyNeXtModel, build_model, model_forward
from .stabilization import RegularizationSchedule, dropout_rate_at
from .tensor import Tape, Tensor, smoothed_cross_entropy

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "dropout", "train_loss", "val_top1", "wall_seconds")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, epoch: int, value: float):
        self.step, self.epoch, self.value = step, epoch, value
        super().__init__(f"non-finite loss {value} at step {step} (epoch {epoch})")


@dataclass(frozen=True)
class TrainRecipe:
    lr_max: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 96
    epochs: int = 20
    warmup_epochs: float = 0.0
    warmup_multiplier: float = 0.1
    label_smoothing: float = 0.1
    ema: bool = True
    ema_decay: float = 0.9999
    ema_start_epoch: int | None = None
    final_dropout: float = 0.0
    stochastic_depth: float = 0.0
    hflip: bool = True
    crop_pad: int = 4
    grad_clip: float | None = None
    checkpoint_every: int = 0
    eval_batch_size: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ValueError("lr_max must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.warmup_epochs < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1, warmup_epochs >= 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")

    @property
    def ema_start(self) -> int:
        """First epoch with weight averaging: the last two thirds of training."""
        if self.ema_start_epoch is not None:
            return self.ema_start_epoch
        return self.epochs - math.ceil(2 * self.epochs / 3)

    @property
    def schedule(self) -> RegularizationSchedule:
        return RegularizationSchedule(self.final_dropout, self.stochastic_depth, self.epochs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecipe":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown recipe keys: {unknown}")
        return cls(**d)


# ---------------------------------------------------------------- schedule

def cosine_lr(step: int, total_steps: int, recipe: TrainRecipe) -> float:
    """Linear warmup from ``lr_max * warmup_multiplier``, then cosine decay to zero."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = min(int(round(recipe.warmup_epochs * total_steps / recipe.epochs)), total_steps - 1)
    if step < warm:
        m = recipe.warmup_multiplier
        return recipe.lr_max * (m + (1.0 - m) * step / warm)
    progress = (step - warm) / max(total_steps - warm, 1)
    return recipe.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------- optimizer

class AdamW:
    """Adam with decoupled weight decay; ``no_decay`` tensors are exempt."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = 0
        self.touched = 0

    def step(self, grads: dict, lr: float, weight_decay: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        self.touched = 0
        for i, (name, p) in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            data = p.data
            if weight_decay and not p.no_decay:
                data = data * (1.0 - lr * weight_decay)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p.data = data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            self.touched += 1

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for (name, _), m, v in zip(self.params, self.m, self.v):
            out[f"adam_m:{name}"] = m
            out[f"adam_v:{name}"] = v
        return out


def adamw_step(params, grads, state: AdamW, lr: float, recipe: TrainRecipe) -> None:
    state.step(grads, lr, recipe.weight_decay)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(float(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# --------------------------------------------------------------------- EMA

def ema_update(ema: dict[str, np.ndarray], live: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    """``ema <- decay * ema + (1 - decay) * live`` over matching registries."""
    if ema.keys() != live.keys():
        missing = sorted(set(ema) ^ set(live))
        raise KeyError(f"EMA registry mismatch: {missing[:5]}")
    for k, v in live.items():
        if ema[k].shape != v.shape:
            raise ValueError(f"EMA entry {k} has shape {ema[k].shape}, live {v.shape}")
        ema[k] = decay * ema[k] + (1.0 - decay) * v
    return ema


def model_state(model: PolyNeXtModel) -> dict[str, np.ndarray]:
    """Parameters and running buffers by name."""
    state = {n: p.data for n, p in model.named_parameters()}
    state.update({f"buffer:{n}": b for n, b in model.named_buffers()})
    return state


def load_state(model: PolyNeXtModel, state: dict[str, np.ndarray], strict: bool = True) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | {f"buffer:{n}" for n in buffers}
    if strict and set(state) != expected:
        diff = sorted(set(state) ^ expected)
        raise KeyError(f"state does not match the model: {diff[:5]}")
    for name, value in state.items():
        if name.startswith("buffer:"):
            model.set_buffer(name[len("buffer:"):], np.asarray(value, dtype=np.float64))
        elif name in params:
            if params[name].shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} vs {params[name].shape}")
            params[name].data = np.array(value, dtype=np.float64)


# ------------------------------------------------------------ augmentation

def augment(images: np.ndarray, rng: np.random.Generator, hflip: bool = True, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and zero-padded random crop back to the input size."""
    n, _, h, w = images.shape
    out = images
    if hflip:
        flips = rng.random(n) < 0.5
        out = out.copy()
        out[flips] = out[flips, :, :, ::-1]
    if pad:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, size=n)
        dx = rng.integers(0, 2 * pad + 1, size=n)
        out = np.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    return np.ascontiguousarray(out)


# -------------------------------------------------------------- evaluation

def predict(model: PolyNeXtModel, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model_forward(Tensor(images[i:i + batch_size]), model, "infer").data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def evaluate(model: PolyNeXtModel, source: DatasetSource, batch_size: int = 250) -> float:
    """Top-1 accuracy as a fraction."""
    if len(source) == 0:
        raise ValueError("cannot evaluate on an empty source")
    logits = predict(model, source.images, batch_size)
    return float((logits.argmax(axis=1) == source.labels).mean())


# ------------------------------------------------------------------- train

@dataclass
class TrainResult:
    model: PolyNeXtModel
    ema_state: dict[str, np.ndarray] | None
    metrics: list[dict]
    losses: list[float]
    checkpoint: Path | None
    rng: np.random.Generator

    def eval_model(self) -> PolyNeXtModel:
        """The weight-averaged model when EMA ran, else the live model."""
        if self.ema_state is None:
            return self.model
        m = copy.deepcopy(self.model)
        load_state(m, self.ema_state)
        return m


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def train(config: ModelConfig, recipe: TrainRecipe, source: DatasetSource,
          val_source: DatasetSource | None = None, out_dir: str | Path | None = None,
          deterministic: bool = False, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``config`` on ``source``; one metrics row per epoch.

    Writes ``metrics.csv`` and ``final.ckpt`` (plus ``epoch_<k>.ckpt`` every
    ``checkpoint_every`` epochs) under ``out_dir`` when given. Evaluation uses
    the EMA weights once averaging has started. In deterministic mode BLAS is
    pinned to one thread and wall time is recorded as 0.
    """
    from .checkpoint import save_checkpoint

    if len(source) == 0:
        raise ValueError("training source is empty")
    if source.images.shape[1:] != (config.in_channels, config.resolution, config.resolution):
        raise ValueError(f"source images {source.images.shape[1:]} do not match the model input "
                         f"({config.in_channels}, {config.resolution}, {config.resolution})")
    if source.classes != config.num_classes:
        raise ValueError(f"source has {source.classes} classes, model {config.num_classes}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    limits = threadpool_limits(limits=1) if deterministic else nullcontext()
    with limits:
        return _train(config, recipe, source, val_source, out, deterministic, on_epoch, save_checkpoint)


def _train(config, recipe, source, val_source, out, deterministic, on_epoch, save_checkpoint):
    rng = np.random.default_rng(recipe.seed)
    model = build_model(config, recipe.seed)
    opt = AdamW(model.named_parameters())
    n = len(source)
    steps_per_epoch = math.ceil(n / recipe.batch_size)
    total = steps_per_epoch * recipe.epochs
    hflip = recipe.hflip and source.hflip
    ema_state: dict[str, np.ndarray] | None = None
    ema_steps = 0
    metrics, losses = [], []
    csv_file = writer = None
    if out is not None:
        csv_file = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
    step = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(recipe.epochs):
            rate = dropout_rate_at(epoch, recipe.schedule)
            perm = rng.permutation(n)
            epoch_losses = []
            lr = recipe.lr_max
            for start in range(0, n, recipe.batch_size):
                idx = perm[start:start + recipe.batch_size]
                x = augment(source.images[idx], rng, hflip, recipe.crop_pad)
                with Tape() as tape:
                    logits = model_forward(Tensor(x), model, "train", rng=rng, dropout_rate=rate,
                                           drop_path=recipe.stochastic_depth)
                    loss = smoothed_cross_entropy(logits, source.labels[idx], recipe.label_smoothing)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(step, epoch, value)
                grads = tape.backward(loss)
                if recipe.grad_clip:
                    clip_grad_norm(grads, recipe.grad_clip)
                lr = cosine_lr(step, total, recipe)
                opt.step(grads, lr, recipe.weight_decay)
                if recipe.ema and epoch >= recipe.ema_start:
                    live = model_state(model)
                    if ema_state is None:
                        ema_state = {k: v.copy() for k, v in live.items()}
                    else:
                        d = min(recipe.ema_decay, (1 + ema_steps) / (10 + ema_steps))
                        ema_update(ema_state, live, d)
                    ema_steps += 1
                epoch_losses.append(value)
                losses.append(value)
                step += 1
            result = TrainResult(model, ema_state, metrics, losses, None, rng)
            val = evaluate(result.eval_model(), val_source, recipe.eval_batch_size) if val_source else float("nan")
            row = {"epoch": epoch, "lr": lr, "dropout": rate, "train_loss": float(np.mean(epoch_losses)),
                   "val_top1": val, "wall_seconds": 0.0 if deterministic else time.perf_counter() - t0}
            metrics.append(row)
            log.info("epoch %d loss %.4f val %.4f", epoch, row["train_loss"], val)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
                csv_file.flush()
            if on_epoch:
                on_epoch(row)
            if out is not None and recipe.checkpoint_every and (epoch + 1) % recipe.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{epoch + 1}.ckpt", model, recipe, epoch + 1, rng, ema_state)
    finally:
        if csv_file is not None:
            csv_file.close()
    ckpt = None
    if out is not None:
        ckpt = out / "final.ckpt"
        save_checkpoint(ckpt, model, recipe, recipe.epochs, rng, ema_state)
        (out / "recipe.json").write_text(json.dumps(recipe.to_dict(), indent=2, sort_keys=True) + "\n")
        config.save(out / "config.json")
    return TrainResult(model, ema_state, metrics, losses, ckpt, rng)
