"""Convolutional feature extractor and the content / style / identity losses built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .config import ModelConfig
from .params import conv_kernel, set_requires_grad, zeros
from .tensor import ShapeError, Tensor
from .transfer import TransferParams, stylize


@dataclass
class EvalConvParams:
    """Three conv stages: (1,3) standard, (C,1) depthwise, (1,3) depthwise + pointwise."""

    conv1: Tensor  # (F1, 1, 1, 3)
    depthwise: Tensor  # (F1*D, 1, C, 1)
    separable: Tensor  # (F1*D, 1, 1, 3)
    pointwise: Tensor  # (F2, F1*D, 1, 1)
    bias1: Tensor | None = None
    bias2: Tensor | None = None
    bias3: Tensor | None = None
    elu: bool = True
    normalize: bool = False
    frozen: bool = True

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> EvalConvParams:
        f1, f1d, f2 = cfg.eval_f1, cfg.eval_f1 * cfg.eval_depth, cfg.eval_f2
        p = cls(
            conv_kernel(rng, (f1, 1, 1, 3)),
            conv_kernel(rng, (f1d, 1, cfg.channels, 1)),
            conv_kernel(rng, (f1d, 1, 1, 3)),
            conv_kernel(rng, (f2, f1d, 1, 1)),
            zeros(f1) if cfg.eval_bias else None,
            zeros(f1d) if cfg.eval_bias else None,
            zeros(f2) if cfg.eval_bias else None,
            elu=cfg.eval_elu,
            normalize=cfg.loss_normalize,
            frozen=cfg.freeze_eval_conv,
        )
        if p.frozen:
            set_requires_grad(p, False)
        return p


def _as_image(x) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"expected (C, B) or (N, C, B), got {x.shape}")
    n, c, b = x.shape
    return T.reshape(x, (n, 1, c, b))


def conv_features(x, params: EvalConvParams) -> list[Tensor]:
    """Channels-first feature maps ``(N, F1, C, B)``, ``(N, F1*D, 1, B)``, ``(N, F2, 1, B)``."""
    img = _as_image(x)
    if img.shape[2] != params.depthwise.shape[2]:
        raise ShapeError(f"eval conv built for {params.depthwise.shape[2]} channels, input has {img.shape[2]}")
    act = T.elu if params.elu else (lambda t: t)
    h_c = act(T.conv2d(img, params.conv1, params.bias1, padding=(0, 1)))
    h_dc = act(T.conv2d(h_c, params.depthwise, params.bias2, kind="depthwise"))
    h_sc = T.conv2d(T.conv2d(h_dc, params.separable, kind="depthwise", padding=(0, 1)),
                    params.pointwise, params.bias3, kind="pointwise")
    return [h_c, h_dc, h_sc]


def extract_features(x, params: EvalConvParams) -> list[Tensor]:
    """Features in channels-last layout: ``(N, C, B, F1)``, ``(N, 1, B, F1*D)``, ``(N, 1, B, F2)``."""
    return [T.transpose(f, (0, 2, 3, 1)) for f in conv_features(x, params)]


def _distance(a: Tensor, b: Tensor, normalize: bool) -> Tensor:
    """Per-sample l2 distance between two channels-first feature maps."""
    d = T.l2_norm(T.sub(a, b), axis=(1, 2, 3))
    if normalize:
        d = T.scalar_mul(d, 1.0 / math.sqrt(a.size // a.shape[0]))
    return d


def _stat_distance(a: Tensor, b: Tensor, normalize: bool) -> Tensor:
    """Per-sample ||mu_a - mu_b|| + ||var_a - var_b|| with statistics per feature channel."""
    mu = T.l2_norm(T.sub(T.mean(a, axis=(2, 3)), T.mean(b, axis=(2, 3))), axis=1)
    var = T.l2_norm(T.sub(T.variance(a, axis=(2, 3)), T.variance(b, axis=(2, 3))), axis=1)
    out = T.add(mu, var)
    if normalize:
        out = T.scalar_mul(out, 1.0 / math.sqrt(a.shape[1]))
    return out


def content_from_features(fa: list[Tensor], fb: list[Tensor], normalize: bool = False) -> Tensor:
    per_sample = T.scalar_mul(_sum([_distance(a, b, normalize) for a, b in zip(fa, fb)]), 1.0 / len(fa))
    return T.mean(per_sample)


def style_from_features(fa: list[Tensor], fb: list[Tensor], normalize: bool = False) -> Tensor:
    per_sample = T.scalar_mul(_sum([_stat_distance(a, b, normalize) for a, b in zip(fa, fb)]), 1.0 / len(fa))
    return T.mean(per_sample)


def _sum(ts: list[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out


def content_loss(x_hat, x_s, params: EvalConvParams) -> Tensor:
    """Mean over layers of the l2 distance between conv features; averaged over a batch."""
    x_hat, x_s = T.as_tensor(x_hat), T.as_tensor(x_s)
    if x_hat.shape != x_s.shape:
        raise ShapeError(f"content_loss: shapes differ {x_hat.shape} vs {x_s.shape}")
    return content_from_features(conv_features(x_hat, params), conv_features(x_s, params), params.normalize)


def style_loss(x_hat, x_t, params: EvalConvParams) -> Tensor:
    x_hat, x_t = T.as_tensor(x_hat), T.as_tensor(x_t)
    if x_hat.shape != x_t.shape:
        raise ShapeError(f"style_loss: shapes differ {x_hat.shape} vs {x_t.shape}")
    return style_from_features(conv_features(x_hat, params), conv_features(x_t, params), params.normalize)


def identity_loss(x_s, x_t, transfer: TransferParams, params: EvalConvParams) -> Tensor:
    """Self-transfer fidelity: each input is fed to both encoders and must come back unchanged."""
    x_ss = stylize(x_s, x_s, transfer)
    x_tt = stylize(x_t, x_t, transfer)
    return T.add(content_loss(x_ss, x_s, params), content_loss(x_tt, x_t, params))
