"""Seeded, splittable random streams.

Each named stream is an independent Philox (counter-based) generator derived
from the run seed, so adding draws to one stream never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, stream: str = "default") -> np.random.Generator:
    key = zlib.crc32(stream.encode("utf-8"))
    seq = np.random.SeedSequence(int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(seq))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of a generator's bit-generator state."""
    return _to_jsonable(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    bitgen = np.random.Philox()
    bitgen.state = _from_jsonable(state)
    return np.random.Generator(bitgen)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__uint64__": [int(v) for v in obj.ravel()]}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__uint64__" in obj:
            return np.array(obj["__uint64__"], dtype=np.uint64)
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
