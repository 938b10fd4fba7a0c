"""Parameter construction and traversal helpers shared by every module."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .tensor import Tensor


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def xavier_matrix(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    return xavier_uniform(rng, (rows, cols), rows, cols)


def conv_kernel(rng: np.random.Generator, shape: tuple[int, int, int, int]) -> Tensor:
    cout, cin, kh, kw = shape
    return xavier_uniform(rng, shape, cin * kh * kw, cout * kh * kw)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested parameter dataclasses/lists into ``{"a.b.0.c": Tensor}``."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.update(named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_parameters(item, f"{prefix}.{i}" if prefix else str(i)))
    return out


def set_requires_grad(obj, flag: bool) -> None:
    for t in named_parameters(obj).values():
        t.requires_grad = flag
