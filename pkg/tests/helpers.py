import dataclasses

import numpy as np

from e2stn.tensor import Tensor


def as_lists(obj):
    """Parameter dataclass tree -> nested dicts of Python lists (for the scalar oracles)."""
    if isinstance(obj, Tensor):
        return obj.data.tolist()
    if dataclasses.is_dataclass(obj):
        return {f.name: as_lists(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, list):
        return [as_lists(o) for o in obj]
    return obj


def randomize(obj, rng, scale=0.5):
    """Replace every array of a parameter tree with random values (so biases and LN terms are non-trivial)."""
    from e2stn.params import named_parameters

    for t in named_parameters(obj).values():
        t.data = rng.normal(0.0, scale, size=t.shape)
    return obj


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))
