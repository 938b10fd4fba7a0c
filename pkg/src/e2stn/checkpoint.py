"""Binary checkpoint container.

Layout (little-endian)::

    b"E2STN\\0"  u16 version
    u32 len  metadata JSON (config, config hash, epoch, optimizer step, PRNG state)
    u32 array count
    repeated, sorted by name:
        u16 len  name (utf-8)
        u8 ndim  ndim * u32 shape
        prod(shape) f64, row-major

Arrays are named ``param/<dotted name>``, ``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig
from .tensor import ShapeError
from .training import AdamState, ModelParams, TrainResult

MAGIC = b"E2STN\0"
VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not fit the configuration."""


@dataclass
class Checkpoint:
    config: TrainConfig
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    best_epoch: int = 0

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    @classmethod
    def from_result(cls, result: TrainResult, cfg: TrainConfig) -> Checkpoint:
        arrays = {f"param/{k}": v.data for k, v in result.params.named().items()}
        for k, m in result.opt.m.items():
            arrays[f"adam_m/{k}"] = np.asarray(m, dtype=np.float64)
            arrays[f"adam_v/{k}"] = np.asarray(result.opt.v[k], dtype=np.float64)
        return cls(cfg, arrays, result.epoch, result.opt.step, result.rng_state, result.best_epoch)

    def model(self) -> ModelParams:
        """Rebuild the parameter tree and load the stored values into it."""
        params = ModelParams.init(self.config)
        for name, p in params.named().items():
            key = f"param/{name}"
            if key not in self.arrays:
                raise CheckpointError(f"checkpoint lacks array {key}")
            if self.arrays[key].shape != p.shape:
                raise ShapeError(f"{key}: stored shape {self.arrays[key].shape} vs model {p.shape}")
            p.data = self.arrays[key].copy()
        return params

    def optimizer(self) -> AdamState:
        state = AdamState(step=self.step)
        for key, arr in self.arrays.items():
            kind, _, name = key.partition("/")
            if kind == "adam_m":
                state.m[name] = arr.copy()
            elif kind == "adam_v":
                state.v[name] = arr.copy()
        return state

    def metadata(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "step": self.step,
            "best_epoch": self.best_epoch,
            "rng_state": self.rng_state,
        }


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata(), sort_keys=True, separators=(",", ":")).encode()
    out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta)), meta,
           struct.pack("<I", len(ckpt.arrays))]
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError(f"{source}: bad magic bytes")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)))
    try:
        cfg = TrainConfig.from_dict(meta["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{source}: bad embedded config: {exc}") from exc
    if cfg.config_hash() != meta["config_hash"]:
        raise CheckpointError(f"{source}: config hash mismatch")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    return Checkpoint(cfg, arrays, meta["epoch"], meta["step"], meta["rng_state"], meta.get("best_epoch", 0))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))
