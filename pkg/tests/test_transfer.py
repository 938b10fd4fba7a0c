import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import e2stn.tensor as T
import naive
from e2stn.config import ConfigError, ModelConfig
from e2stn.params import named_parameters
from e2stn.tensor import ShapeError, Tensor, grad_check
from e2stn.transfer import (AttentionParams, DecoderParams, EncoderParams, TransferParams, attention,
                            attention_weights, decode, encode, reconstruct, stylize)
from helpers import as_lists, max_abs, randomize


def tiny_transfer(seed=0, **overrides):
    cfg = ModelConfig.tiny(**overrides)
    return cfg, TransferParams.init(np.random.default_rng(seed), cfg)


def test_encoder_matches_scalar_oracle():
    cfg = ModelConfig(channels=3, bands=3, model_dim=4, heads=2, ffn_dim=3)
    enc = randomize(EncoderParams.init(np.random.default_rng(1), cfg), np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(3, 3))
    ref = naive.encoder_layer(x.tolist(), as_lists(enc.layers[0]), 2, cfg.ln_eps)
    assert max_abs(encode(Tensor(x), enc).data, ref) < 1e-10


def test_encoder_input_residual_matches_oracle():
    cfg = ModelConfig(channels=3, bands=3, model_dim=3, heads=1, ffn_dim=2, residual="input", attn_scale=False)
    enc = randomize(EncoderParams.init(np.random.default_rng(4), cfg), np.random.default_rng(5))
    x = np.random.default_rng(6).normal(size=(3, 3))
    ref = naive.encoder_layer(x.tolist(), as_lists(enc.layers[0]), 1, cfg.ln_eps, residual="input", scale=False)
    assert max_abs(encode(Tensor(x), enc).data, ref) < 1e-10


def test_decoder_layer_matches_scalar_oracle():
    cfg = ModelConfig(channels=3, bands=3, model_dim=4, heads=2, ffn_dim=3, decoder_layers=1)
    dec = randomize(DecoderParams.init(np.random.default_rng(7), cfg), np.random.default_rng(8))
    rng = np.random.default_rng(9)
    z, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ref = naive.decoder_layer(z.tolist(), t.tolist(), as_lists(dec.layers[0]), 2, cfg.ln_eps)
    assert max_abs(decode(Tensor(z), Tensor(t), dec).data, ref) < 1e-10


def test_identity_projection_hand_case():
    # C=2, B=m=2, h=1, identity projections and a zero FFN
    cfg = ModelConfig(channels=2, bands=2, model_dim=2, heads=1, ffn_dim=2)
    enc = EncoderParams.init(np.random.default_rng(0), cfg)
    layer = enc.layers[0]
    for w in (layer.attn.wq, layer.attn.wk, layer.attn.wv, layer.attn.wo):
        w.data = np.eye(2)
    for w in (layer.ffn.w1, layer.ffn.b1, layer.ffn.w2, layer.ffn.b2):
        w.data = np.zeros_like(w.data)
    x = np.array([[1.0, 0.0], [0.5, 2.0]])
    logits = x @ x.T / np.sqrt(2.0)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    h1 = probs @ x + x
    h1 = (h1 - h1.mean(1, keepdims=True)) / np.sqrt(h1.var(1, keepdims=True) + 1e-5)
    h2 = (h1 - h1.mean(1, keepdims=True)) / np.sqrt(h1.var(1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(encode(Tensor(x), enc).data, h2, atol=1e-12)


def test_single_channel_attention_is_value_projection():
    rng = np.random.default_rng(0)
    q, k, v, wo = rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=(4, 4))
    out = attention(Tensor(q), Tensor(k), Tensor(v), 2, Tensor(wo))
    np.testing.assert_allclose(out.data, v @ wo, atol=1e-12)


def test_identical_keys_give_uniform_weights():
    rng = np.random.default_rng(1)
    q, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    k = np.tile(rng.normal(size=(1, 4)), (3, 1))
    out = attention(Tensor(q), Tensor(k), Tensor(v), 2)
    np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (3, 1)), atol=1e-12)


def test_one_head_is_single_head_formula():
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
    s = q @ k.T / 2.0
    p = np.exp(s - s.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    np.testing.assert_allclose(attention(Tensor(q), Tensor(k), Tensor(v), 1).data, p @ v, atol=1e-12)


def test_two_by_two_attention_brute_force():
    rng = np.random.default_rng(3)
    q, k, v = (rng.normal(size=(2, 2)) for _ in range(3))
    ref = naive.multi_head(q.tolist(), k.tolist(), v.tolist(), 2)
    assert max_abs(attention(Tensor(q), Tensor(k), Tensor(v), 2).data, ref) < 1e-12


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        attention_weights(Tensor(np.ones((1, 2, 6))), Tensor(np.ones((1, 2, 6))), 4)
    with pytest.raises(ConfigError):
        ModelConfig(model_dim=6, heads=4).validate()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_attention_rows_sum_to_one(seed, scale):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(0, 3, size=(2, 5, 8)), rng.normal(0, 3, size=(2, 5, 8))
    w = attention_weights(Tensor(q), Tensor(k), 2, scale).data
    assert np.all(np.abs(w.sum(axis=-1) - 1.0) <= 1e-12)


def test_zero_target_values_leave_normalized_residual():
    cfg = ModelConfig(channels=3, bands=3, model_dim=4, heads=2, ffn_dim=3, decoder_layers=1)
    dec = randomize(DecoderParams.init(np.random.default_rng(0), cfg), np.random.default_rng(1))
    layer = dec.layers[0]
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 4))
    # cross-attention over zero target features: K = V = 0
    self_out = naive.attention_sublayer(z.tolist(), z.tolist(), as_lists(layer.self_attn),
                                        as_lists(layer.norm1), 2, cfg.ln_eps)
    q = np.asarray(self_out) @ layer.cross_attn.wq.data
    after_cross = naive.layer_norm(q.tolist(), layer.norm2.gamma.data.tolist(), layer.norm2.beta.data.tolist(), cfg.ln_eps)
    ref = naive.ffn_sublayer(after_cross, as_lists(layer.ffn), as_lists(layer.norm3), cfg.ln_eps)
    assert max_abs(decode(Tensor(z), Tensor(np.zeros((3, 4))), dec).data, ref) < 1e-10


def test_zeroed_output_projections_reduce_to_layer_norm_of_residual():
    cfg = ModelConfig(channels=3, bands=4, model_dim=4, heads=2, ffn_dim=3)
    enc = randomize(EncoderParams.init(np.random.default_rng(0), cfg), np.random.default_rng(1))
    layer = enc.layers[0]
    layer.attn.wo.data[:] = 0.0
    layer.ffn.w2.data[:] = 0.0
    layer.ffn.b2.data[:] = 0.0
    x = np.random.default_rng(2).normal(size=(3, 4))
    q = x @ layer.attn.wq.data
    h = naive.layer_norm(q.tolist(), *as_lists(layer.norm1).values(), cfg.ln_eps)
    ref = naive.layer_norm(h, *as_lists(layer.norm2).values(), cfg.ln_eps)
    assert max_abs(encode(Tensor(x), enc).data, ref) < 1e-12


def test_shapes_are_preserved():
    cfg, params = tiny_transfer()
    x = np.random.default_rng(0).normal(size=(5, cfg.channels, cfg.bands))
    hs = encode(Tensor(x), params.source_encoder)
    assert hs.shape == (5, cfg.channels, cfg.model_dim)
    assert decode(hs, hs, params.decoder).shape == hs.shape
    assert stylize(Tensor(x), Tensor(x[::-1].copy()), params).shape == x.shape
    assert stylize(Tensor(x[0]), Tensor(x[1]), params).shape == (cfg.channels, cfg.bands)


def test_band_mismatch_is_shape_error():
    cfg, params = tiny_transfer()
    with pytest.raises(ShapeError):
        encode(Tensor(np.ones((cfg.channels, cfg.bands + 1))), params.source_encoder)
    with pytest.raises(ShapeError):
        stylize(Tensor(np.ones((2, cfg.channels, cfg.bands))), Tensor(np.ones((3, cfg.channels, cfg.bands))), params)


def test_reconstruct_zero_weights_give_zero():
    cfg, params = tiny_transfer()
    for t in named_parameters(params.cnn).values():
        t.data = np.zeros_like(t.data)
    out = reconstruct(Tensor(np.random.default_rng(0).normal(size=(cfg.channels, cfg.model_dim))), params.cnn)
    assert np.array_equal(out.data, np.zeros((cfg.channels, cfg.bands)))


def test_stylize_deterministic_and_batch_consistent():
    cfg, params = tiny_transfer(seed=3)
    _, again = tiny_transfer(seed=3)
    rng = np.random.default_rng(4)
    xs, xt = rng.normal(size=(3, cfg.channels, cfg.bands)), rng.normal(size=(3, cfg.channels, cfg.bands))
    a = stylize(Tensor(xs), Tensor(xt), params).data
    assert np.array_equal(a, stylize(Tensor(xs), Tensor(xt), again).data)
    np.testing.assert_allclose(stylize(Tensor(xs[1]), Tensor(xt[1]), params).data, a[1], atol=1e-12)


def test_stylize_gradient_reaches_inputs_and_encoders():
    cfg, params = tiny_transfer(seed=1)
    rng = np.random.default_rng(5)
    xs = Tensor(rng.normal(size=(2, cfg.channels, cfg.bands)), requires_grad=True)
    xt = Tensor(rng.normal(size=(2, cfg.channels, cfg.bands)), requires_grad=True)
    w = rng.normal(size=xs.shape)
    wq = params.source_encoder.layers[0].attn.wq
    err = grad_check(lambda: T.reduce_sum(T.mul(stylize(xs, xt, params), Tensor(w))), [xs, xt, wq])
    assert err < 1e-6
    assert np.any(xs.grad != 0) and np.any(xt.grad != 0)


def test_attention_params_shapes():
    p = AttentionParams.init(np.random.default_rng(0), 3, 3, 8)
    assert p.wq.shape == (3, 8) and p.wo.shape == (8, 8)
