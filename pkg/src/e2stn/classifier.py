"""Dynamic-graph Chebyshev classifier and electrode contribution export."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .params import xavier_matrix, zeros
from .tensor import ShapeError, Tensor

PROB_FLOOR = 1e-12
ROW_NORM_EPS = 1e-6


class LabelError(ValueError):
    """Targets are not valid one-hot rows."""


@dataclass
class DynamicGraphParams:
    w_s: Tensor  # (C, C)
    w_f: Tensor  # (B, C*B)
    bias: Tensor  # (C, B)
    theta: Tensor | None  # (B*K, F); None sums the polynomial terms without mixing
    cheb_order: int = 2
    row_normalize: bool = True

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> DynamicGraphParams:
        c, b, k = cfg.channels, cfg.bands, cfg.cheb_order
        theta = xavier_matrix(rng, b * k, cfg.gcn_out) if cfg.mix_orders else None
        return cls(xavier_matrix(rng, c, c), xavier_matrix(rng, b, c * b), zeros(c, b), theta, k, cfg.row_normalize)

    @property
    def out_width(self) -> int:
        return self.bias.shape[1] if self.theta is None else self.theta.shape[1]


@dataclass
class ClassifierHead:
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def init(cls, rng, in_width: int, hidden: int, classes: int) -> ClassifierHead:
        return cls(xavier_matrix(rng, in_width, hidden), zeros(hidden), xavier_matrix(rng, hidden, classes), zeros(classes))


@dataclass
class ClassifierParams:
    graph: DynamicGraphParams
    head: ClassifierHead
    logit_clamp: float = 40.0

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> ClassifierParams:
        cfg.validate()
        graph = DynamicGraphParams.init(rng, cfg)
        head = ClassifierHead.init(rng, cfg.channels * graph.out_width, cfg.fc_hidden, cfg.classes)
        return cls(graph, head, cfg.logit_clamp)


def _batched(x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (C, B) or (N, C, B), got {x.shape}")
    return x, False


def build_graph(x, params: DynamicGraphParams) -> Tensor:
    """Per-band nonnegative adjacency, returned as ``(N, B, C, C)``.

    ``ReLU((W_s X + Bias) W_f)`` is ``C x (C*B)``; column block ``b`` (columns
    ``b*C .. b*C+C-1``) becomes the adjacency of band ``b``.
    """
    x, squeeze = _batched(x)
    n, c, b = x.shape
    if params.w_s.shape != (c, c) or params.w_f.shape != (b, c * b):
        raise ShapeError(f"graph params {params.w_s.shape}/{params.w_f.shape} do not fit input {x.shape}")
    g = T.relu(T.matmul(T.add(T.matmul(params.w_s, x), params.bias), params.w_f))
    g = T.transpose(T.reshape(g, (n, c, b, c)), (0, 2, 1, 3))
    return T.reshape(g, g.shape[1:]) if squeeze else g


def normalize_rows(g: Tensor) -> Tensor:
    return T.div(g, T.add(T.reduce_sum(g, axis=-1, keepdims=True), ROW_NORM_EPS))


def polynomial_terms(x, g, order: int) -> Tensor:
    """``G_b^k x[:, b]`` for every band and ``k < order``, shaped ``(N, C, B*order)`` (band-major)."""
    if order < 1:
        raise ConfigError(f"Chebyshev order must be >= 1, got {order}")
    x, _ = _batched(x)
    g = T.as_tensor(g)
    if g.ndim == 3:
        g = T.reshape(g, (1,) + g.shape)
    n, c, b = x.shape
    col = T.reshape(T.transpose(x, (0, 2, 1)), (n, b, c, 1))
    terms = [col]
    for _ in range(1, order):
        terms.append(T.matmul(g, terms[-1]))
    stacked = T.concat(terms, axis=3)  # (N, B, C, K)
    return T.reshape(T.transpose(stacked, (0, 2, 1, 3)), (n, c, b * order))


def cheb_conv(x, g, params: DynamicGraphParams) -> Tensor:
    """Graph convolution ``sum_k G^k X`` mixed to width F by ``theta``; returns ``(N, C, F)``."""
    if params.cheb_order < 1:
        raise ConfigError(f"Chebyshev order must be >= 1, got {params.cheb_order}")
    g = T.as_tensor(g)
    if params.row_normalize:
        g = normalize_rows(g)
    terms = polynomial_terms(x, g, params.cheb_order)
    if params.theta is not None:
        return T.matmul(terms, params.theta)
    n, c, bk = terms.shape
    return T.reduce_sum(T.reshape(terms, (n, c, bk // params.cheb_order, params.cheb_order)), axis=3)


def graph_features(x, params: ClassifierParams) -> Tensor:
    x, _ = _batched(x)
    return cheb_conv(x, build_graph(x, params.graph), params.graph)


def logits(x, params: ClassifierParams) -> Tensor:
    x, squeeze = _batched(x)
    h = graph_features(x, params)
    n = h.shape[0]
    flat = T.reshape(h, (n, -1))
    hidden = T.elu(T.add(T.matmul(flat, params.head.fc1_w), params.head.fc1_b))
    out = T.add(T.matmul(hidden, params.head.fc2_w), params.head.fc2_b)
    out = T.clip(out, -params.logit_clamp, params.logit_clamp)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def predict(x, params: ClassifierParams) -> Tensor:
    """Class probabilities ``(N, P)`` (or ``(P,)`` for a single trial)."""
    return T.softmax_rows(logits(x, params))


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes})")
    out = np.zeros(labels.shape + (classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def cross_entropy(y_hat, y) -> Tensor:
    """Batch mean of ``-sum(y * log(max(y_hat, 1e-12)))`` for one-hot ``y``."""
    y_hat = T.as_tensor(y_hat)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise LabelError(f"target shape {y.shape} does not match predictions {y_hat.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise LabelError("targets must be one-hot rows")
    ll = T.reduce_sum(T.mul(T.log(y_hat, PROB_FLOOR), y), axis=-1)
    return T.scalar_mul(T.mean(ll), -1.0)


def export_contribution(h_dg, channel_names: Sequence[str]) -> dict:
    """Mean |activation| per channel over samples and features, min-max scaled to [0, 1].

    When every channel scores the same the map is all ones.
    """
    h = np.asarray(h_dg.data if isinstance(h_dg, Tensor) else h_dg, dtype=np.float64)
    if h.ndim == 2:
        h = h[None]
    if h.ndim != 3 or h.shape[0] == 0:
        raise ValueError("contribution export needs a non-empty (N, C, F) sample set")
    if h.shape[1] != len(channel_names):
        raise ShapeError(f"{len(channel_names)} channel names for {h.shape[1]} channels")
    raw = np.abs(h).mean(axis=(0, 2))
    lo, hi = raw.min(), raw.max()
    scores = np.ones_like(raw) if hi == lo else (raw - lo) / (hi - lo)
    return {"channels": list(channel_names), "scores": [float(s) for s in scores]}


def save_contribution(contribution: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(contribution, indent=2) + "\n")
