"""Style-transfer network: per-domain attention encoders, cross-attention decoder, CNN reconstruction.

All functions accept a single ``(C, B)`` feature matrix or a ``(N, C, B)``
batch and return the matching rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .params import conv_kernel, ones, xavier_matrix, zeros
from .tensor import ShapeError, Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, width: int) -> NormParams:
        return cls(ones(width), zeros(width))


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def init(cls, rng, in_q: int, in_kv: int, width: int) -> AttentionParams:
        return cls(
            xavier_matrix(rng, in_q, width),
            xavier_matrix(rng, in_kv, width),
            xavier_matrix(rng, in_kv, width),
            xavier_matrix(rng, width, width),
        )


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, width: int, hidden: int) -> FeedForwardParams:
        return cls(xavier_matrix(rng, width, hidden), zeros(hidden), xavier_matrix(rng, hidden, width), zeros(width))


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    norm1: NormParams
    ffn: FeedForwardParams
    norm2: NormParams


@dataclass
class EncoderParams:
    layers: list[EncoderLayerParams]
    head_count: int
    attn_scale: bool = True
    residual: str = "query"
    ln_eps: float = 1e-5

    @property
    def in_width(self) -> int:
        return self.layers[0].attn.wq.shape[0]

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> EncoderParams:
        layers = []
        for i in range(cfg.encoder_layers):
            width_in = cfg.bands if i == 0 else cfg.model_dim
            layers.append(EncoderLayerParams(
                AttentionParams.init(rng, width_in, width_in, cfg.model_dim),
                NormParams.init(cfg.model_dim),
                FeedForwardParams.init(rng, cfg.model_dim, cfg.ffn_dim),
                NormParams.init(cfg.model_dim),
            ))
        return cls(layers, cfg.heads, cfg.attn_scale, cfg.residual, cfg.ln_eps)


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    norm1: NormParams
    cross_attn: AttentionParams
    norm2: NormParams
    ffn: FeedForwardParams
    norm3: NormParams


@dataclass
class DecoderParams:
    layers: list[DecoderLayerParams]
    head_count: int
    attn_scale: bool = True
    residual: str = "query"
    ln_eps: float = 1e-5

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> DecoderParams:
        m = cfg.model_dim
        layers = [
            DecoderLayerParams(
                AttentionParams.init(rng, m, m, m),
                NormParams.init(m),
                AttentionParams.init(rng, m, m, m),
                NormParams.init(m),
                FeedForwardParams.init(rng, m, cfg.ffn_dim),
                NormParams.init(m),
            )
            for _ in range(cfg.decoder_layers)
        ]
        return cls(layers, cfg.heads, cfg.attn_scale, cfg.residual, cfg.ln_eps)


@dataclass
class CnnDecoderParams:
    """Linear m->B projection, then two (1x3) same-padded convolutions over the band axis."""

    proj_w: Tensor
    proj_b: Tensor
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> CnnDecoderParams:
        hidden = cfg.cnn_hidden
        return cls(
            xavier_matrix(rng, cfg.model_dim, cfg.bands),
            zeros(cfg.bands),
            conv_kernel(rng, (hidden, 1, 1, 3)),
            zeros(hidden),
            conv_kernel(rng, (1, hidden, 1, 3)),
            zeros(1),
        )


@dataclass
class TransferParams:
    source_encoder: EncoderParams
    target_encoder: EncoderParams
    decoder: DecoderParams
    cnn: CnnDecoderParams
    dropout: float = 0.0
    dropout_rng: np.random.Generator | None = field(default=None, repr=False, compare=False)

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> TransferParams:
        cfg.validate()
        return cls(
            EncoderParams.init(rng, cfg),
            EncoderParams.init(rng, cfg),
            DecoderParams.init(rng, cfg),
            CnnDecoderParams.init(rng, cfg),
            cfg.dropout,
        )


def _batched(x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (C, B) or (N, C, B), got {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


def _split_heads(x: Tensor, h: int) -> Tensor:
    n, c, m = x.shape
    return T.transpose(T.reshape(x, (n, c, h, m // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, c, p = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (n, c, h * p))


def attention_weights(q: Tensor, k: Tensor, head_count: int, scale: bool = True) -> Tensor:
    """Per-head attention probabilities ``(N, h, Cq, Ck)``; each row sums to one."""
    m = q.shape[-1]
    if m % head_count:
        raise ConfigError(f"width {m} is not divisible by {head_count} heads")
    qh, kh = _split_heads(q, head_count), _split_heads(k, head_count)
    logits = T.matmul(qh, T.transpose_last_two(kh))
    if scale:
        logits = T.scalar_mul(logits, 1.0 / math.sqrt(m // head_count))
    return T.softmax_rows(logits)


def attention(q, k, v, head_count: int, w_o: Tensor | None = None, scale: bool = True) -> Tensor:
    """Multi-head scaled dot-product attention with heads concatenated and projected by ``w_o``."""
    q, squeeze = _batched(q)
    k, _ = _batched(k)
    v, _ = _batched(v)
    if not (q.shape[-1] == k.shape[-1] == v.shape[-1]) or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    probs = attention_weights(q, k, head_count, scale)
    out = _merge_heads(T.matmul(probs, _split_heads(v, head_count)))
    if w_o is not None:
        out = T.matmul(out, w_o)
    return _unbatch(out, squeeze)


def _attention_sublayer(query_stream, kv_stream, p: AttentionParams, norm: NormParams, head_count, scale,
                        residual, eps, drop=0.0, rng=None) -> Tensor:
    q = T.matmul(query_stream, p.wq)
    k = T.matmul(kv_stream, p.wk)
    v = T.matmul(kv_stream, p.wv)
    msa = T.dropout(attention(q, k, v, head_count, p.wo, scale), drop, rng)
    skip = q if residual == "query" else query_stream
    return T.layer_norm(T.add(msa, skip), norm.gamma, norm.beta, eps)


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    hidden = T.relu(T.add(T.matmul(x, p.w1), p.b1))
    return T.add(T.matmul(hidden, p.w2), p.b2)


def _ffn_sublayer(x, p: FeedForwardParams, norm: NormParams, eps, drop=0.0, rng=None) -> Tensor:
    return T.layer_norm(T.add(T.dropout(feed_forward(x, p), drop, rng), x), norm.gamma, norm.beta, eps)


def encode(x, params: EncoderParams, dropout: float = 0.0, rng=None) -> Tensor:
    """Domain encoder: ``LN(FFN(H') + H')`` with ``H' = LN(MSA(Q, K, V) + Q)``; returns ``(..., C, m)``."""
    x, squeeze = _batched(x)
    if x.shape[-1] != params.in_width:
        raise ShapeError(f"encoder expects {params.in_width} bands, got input of shape {x.shape}")
    h = x
    for layer in params.layers:
        h = _attention_sublayer(h, h, layer.attn, layer.norm1, params.head_count, params.attn_scale,
                                params.residual, params.ln_eps, dropout, rng)
        h = _ffn_sublayer(h, layer.ffn, layer.norm2, params.ln_eps, dropout, rng)
    return _unbatch(h, squeeze)


def decode(source_feats, target_feats, params: DecoderParams, dropout: float = 0.0, rng=None) -> Tensor:
    """Stack of (self-attention, cross-attention to the target features, FFN) layers.

    The query stream starts as the source features and is carried from layer
    to layer; keys and values of every cross-attention come from ``target_feats``.
    """
    z, squeeze = _batched(source_feats)
    t, _ = _batched(target_feats)
    if z.shape != t.shape:
        raise ShapeError(f"decoder inputs differ in shape: {z.shape} vs {t.shape}")
    for layer in params.layers:
        z = _attention_sublayer(z, z, layer.self_attn, layer.norm1, params.head_count, params.attn_scale,
                                params.residual, params.ln_eps, dropout, rng)
        z = _attention_sublayer(z, t, layer.cross_attn, layer.norm2, params.head_count, params.attn_scale,
                                params.residual, params.ln_eps, dropout, rng)
        z = _ffn_sublayer(z, layer.ffn, layer.norm3, params.ln_eps, dropout, rng)
    return _unbatch(z, squeeze)


def reconstruct(h, params: CnnDecoderParams) -> Tensor:
    """Map decoder output ``(..., C, m)`` back to a ``(..., C, B)`` feature matrix."""
    h, squeeze = _batched(h)
    n, c, _ = h.shape
    y = T.add(T.matmul(h, params.proj_w), params.proj_b)
    bands = y.shape[-1]
    y = T.reshape(y, (n, 1, c, bands))
    y = T.elu(T.conv2d(y, params.conv1_w, params.conv1_b, padding=(0, 1)))
    y = T.conv2d(y, params.conv2_w, params.conv2_b, padding=(0, 1))
    return _unbatch(T.reshape(y, (n, c, bands)), squeeze)


def stylize(x_s, x_t, params: TransferParams) -> Tensor:
    """Render source content with target style: reconstruct(decode(enc_s(x_s), enc_t(x_t)))."""
    x_s, x_t = T.as_tensor(x_s), T.as_tensor(x_t)
    if x_s.shape != x_t.shape:
        raise ShapeError(f"stylize: source {x_s.shape} and target {x_t.shape} differ")
    drop, rng = params.dropout, params.dropout_rng
    hs = encode(x_s, params.source_encoder, drop, rng)
    ht = encode(x_t, params.target_encoder, drop, rng)
    return reconstruct(decode(hs, ht, params.decoder, drop, rng), params.cnn)
