"""Binary checkpoint container.

Layout (little-endian)::

    8 bytes   magic b"PNXCKPT\\0"
    u32       format version
    u32       header length, then that many bytes of UTF-8 JSON
    u32       tensor count, then per tensor:
              u16 name length, name bytes, u8 rank, rank x u32 dims,
              prod(dims) x f32 payload

The JSON header holds the model config, the recipe, the epoch and the RNG
state. Keys are sorted so equal inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, PolyNeXtModel, build_model

MAGIC = b"PNXCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    recipe: dict
    epoch: int
    rng_state: dict | None
    tensors: dict[str, np.ndarray]  # float32

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Entries under ``prefix`` (``""`` for the live model, ``"ema:"`` for averages)."""
        if prefix:
            return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        return {k: v for k, v in self.tensors.items() if not k.startswith("ema:")}

    def has_ema(self) -> bool:
        return any(k.startswith("ema:") for k in self.tensors)


def _named_tensors(model: PolyNeXtModel, ema_state: dict | None) -> list[tuple[str, np.ndarray]]:
    from .training import model_state

    items = list(model_state(model).items())
    if ema_state is not None:
        items += [(f"ema:{k}", v) for k, v in ema_state.items()]
    return items


def write_checkpoint(path: str | Path, config: ModelConfig, tensors, recipe: dict | None = None,
                     epoch: int = 0, rng_state: dict | None = None) -> None:
    header = json.dumps({"config": config.to_dict(), "recipe": recipe or {}, "epoch": epoch,
                         "rng_state": rng_state}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(tensors))]
    for name, value in tensors:
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode()
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def save_checkpoint(path: str | Path, model: PolyNeXtModel, recipe=None, epoch: int = 0,
                    rng: np.random.Generator | None = None, ema_state: dict | None = None) -> None:
    recipe_d = recipe.to_dict() if hasattr(recipe, "to_dict") else (recipe or {})
    rng_state = rng.bit_generator.state if rng is not None else None
    write_checkpoint(path, model.config, _named_tensors(model, ema_state), recipe_d, epoch, rng_state)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint")
    try:
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 16
        header = json.loads(data[off:off + hlen].decode())
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(data):
                raise CheckpointError(f"truncated payload for {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(data):
        raise CheckpointError("trailing bytes after the last tensor")
    return Checkpoint(ModelConfig.from_dict(header["config"]), header["recipe"], header["epoch"],
                      header["rng_state"], tensors)


def restore_model(ckpt: Checkpoint, ema: bool = False) -> PolyNeXtModel:
    """Model rebuilt from the checkpoint (EMA weights when ``ema`` and present)."""
    from .training import load_state

    model = build_model(ckpt.config, 0)
    state = ckpt.state("ema:") if ema and ckpt.has_ema() else ckpt.state()
    load_state(model, {k: v.astype(np.float64) for k, v in state.items()})
    return model


def quantize_f32(model: PolyNeXtModel) -> None:
    """Round every parameter and buffer to float32 precision in place."""
    for _, p in model.named_parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)
    for name, b in list(model.named_buffers()):
        model.set_buffer(name, b.astype(np.float32).astype(np.float64))
