import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import naive
import e2stn.tensor as T
from e2stn.classifier import (ClassifierParams, DynamicGraphParams, LabelError, build_graph, cheb_conv,
                              cross_entropy, export_contribution, graph_features, logits, one_hot, predict,
                              save_contribution)
from e2stn.config import ConfigError, ModelConfig
from e2stn.params import named_parameters
from e2stn.tensor import ShapeError, Tensor, grad_check
from helpers import max_abs


def graph_params(seed=0, **overrides):
    cfg = ModelConfig.tiny(**overrides)
    return cfg, DynamicGraphParams.init(np.random.default_rng(seed), cfg)


def test_zero_weights_give_zero_graph():
    cfg, p = graph_params()
    p.w_s.data[:] = 0.0
    g = build_graph(Tensor(np.random.default_rng(0).normal(size=(cfg.channels, cfg.bands))), p)
    assert np.array_equal(g.data, np.zeros((cfg.bands, cfg.channels, cfg.channels)))


def test_relu_clamp_hand_case():
    p = DynamicGraphParams(Tensor([[1.0]]), Tensor([[1.0]]), Tensor([[-3.0]]), None, 2)
    assert build_graph(Tensor([[2.0]]), p).data.tolist() == [[[0.0]]]


def test_graph_matches_oracle_column_blocks():
    cfg = ModelConfig(channels=3, bands=2, cheb_order=2, gcn_out=2)
    p = DynamicGraphParams.init(np.random.default_rng(1), cfg)
    p.bias.data = np.random.default_rng(2).normal(size=p.bias.shape)
    x = np.random.default_rng(3).normal(size=(3, 2))
    ref = naive.dynamic_graph(x.tolist(), p.w_s.data.tolist(), p.bias.data.tolist(), p.w_f.data.tolist())
    assert max_abs(build_graph(Tensor(x), p).data, ref) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_graph_nonnegative(seed):
    rng = np.random.default_rng(seed)
    cfg, p = graph_params(seed % 5)
    p.bias.data = rng.normal(size=p.bias.shape)
    x = rng.normal(0, 5, size=(50, cfg.channels, cfg.bands))
    assert np.all(build_graph(Tensor(x), p).data >= 0)


@pytest.mark.parametrize("row_normalize", [True, False])
@pytest.mark.parametrize("order", [1, 2, 3])
def test_cheb_conv_matches_oracle(order, row_normalize):
    cfg = ModelConfig(channels=3, bands=3, cheb_order=order, gcn_out=2, row_normalize=row_normalize)
    p = DynamicGraphParams.init(np.random.default_rng(order), cfg)
    rng = np.random.default_rng(10 + order)
    x = rng.normal(size=(3, 3))
    g = np.abs(rng.normal(size=(3, 3, 3)))
    ref = naive.cheb(x.tolist(), g.tolist(), order, p.theta.data.tolist(), row_normalize)
    assert max_abs(cheb_conv(Tensor(x), Tensor(g), p).data[0], ref) < 1e-10


def test_cheb_conv_literal_sum_matches_dense_powers():
    # C=2, B=1, K=2 without row normalisation or mixing: x + G x
    cfg = ModelConfig(channels=2, bands=1, cheb_order=2, mix_orders=False, row_normalize=False)
    p = DynamicGraphParams.init(np.random.default_rng(0), cfg)
    x = np.array([[1.0], [2.0]])
    g = np.array([[[0.5, 1.0], [2.0, 0.0]]])
    expected = x + g[0] @ x
    np.testing.assert_allclose(cheb_conv(Tensor(x), Tensor(g), p).data[0], expected, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_order_one_ignores_graph(seed):
    cfg, p = graph_params(0, cheb_order=1)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, cfg.channels, cfg.bands))
    g1, g2 = np.abs(rng.normal(size=(2, cfg.bands, cfg.channels, cfg.channels))), np.zeros((2, cfg.bands, cfg.channels, cfg.channels))
    assert np.array_equal(cheb_conv(Tensor(x), Tensor(g1), p).data, cheb_conv(Tensor(x), Tensor(g2), p).data)


def test_zero_graph_order_two_equals_order_one():
    cfg, p2 = graph_params(0, cheb_order=2)
    x = np.random.default_rng(1).normal(size=(cfg.channels, cfg.bands))
    g = np.zeros((cfg.bands, cfg.channels, cfg.channels))
    out2 = cheb_conv(Tensor(x), Tensor(g), p2).data
    theta_k0 = p2.theta.data[0::2]  # band-major layout: rows b*K + 0
    np.testing.assert_allclose(out2[0], x @ theta_k0, atol=1e-14)


def test_order_below_one_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(cheb_order=0).validate()
    _, p = graph_params()
    p.cheb_order = 0
    with pytest.raises(ConfigError):
        cheb_conv(Tensor(np.ones((4, 3))), Tensor(np.ones((3, 4, 4))), p)


def classifier(seed=0, **overrides):
    cfg = ModelConfig.tiny(**overrides)
    return cfg, ClassifierParams.init(np.random.default_rng(seed), cfg)


def test_predict_rows_sum_to_one_and_keep_argmax():
    cfg, p = classifier()
    x = np.random.default_rng(0).normal(size=(7, cfg.channels, cfg.bands))
    probs = predict(Tensor(x), p).data
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-12)
    assert np.array_equal(probs.argmax(1), logits(Tensor(x), p).data.argmax(1))


def test_zero_weights_predict_uniform():
    cfg, p = classifier()
    for t in named_parameters(p).values():
        t.data = np.zeros_like(t.data)
    probs = predict(Tensor(np.random.default_rng(0).normal(size=(3, cfg.channels, cfg.bands))), p).data
    np.testing.assert_allclose(probs, 1.0 / cfg.classes, atol=1e-15)


def test_logits_are_clamped():
    cfg, p = classifier()
    p.head.fc2_b.data = np.array([1e6, -1e6, 0.0])
    out = logits(Tensor(np.zeros((cfg.channels, cfg.bands))), p).data
    assert out.max() <= 40.0 and out.min() >= -40.0


def test_cross_entropy_identities():
    y = one_hot([0, 2], 3)
    assert cross_entropy(Tensor(y), y).item() == 0.0
    assert abs(cross_entropy(Tensor(np.full((2, 3), 1 / 3)), y).item() - math.log(3)) < 1e-12


def test_cross_entropy_matches_oracle():
    rng = np.random.default_rng(0)
    raw = rng.random((6, 4)) + 1e-3
    probs = raw / raw.sum(1, keepdims=True)
    labels = rng.integers(0, 4, 6)
    ref = naive.cross_entropy(probs.tolist(), labels.tolist())
    assert abs(cross_entropy(Tensor(probs), one_hot(labels, 4)).item() - ref) < 1e-12


def test_cross_entropy_floor_keeps_zero_probability_finite():
    val = cross_entropy(Tensor([[0.0, 1.0]]), one_hot([0], 2)).item()
    assert val == pytest.approx(-math.log(1e-12))


def test_cross_entropy_rejects_non_one_hot():
    with pytest.raises(LabelError):
        cross_entropy(Tensor([[0.5, 0.5]]), np.array([[0.5, 0.5]]))
    with pytest.raises(LabelError):
        one_hot([3], 3)


def test_classifier_gradient_check():
    cfg, p = classifier(seed=1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, cfg.channels, cfg.bands))
    y = one_hot([0, 2], cfg.classes)
    # keep away from ReLU kinks in the graph construction
    pre = (p.graph.w_s.data @ x + p.graph.bias.data) @ p.graph.w_f.data
    assert np.min(np.abs(pre)) > 1e-4
    params = list(named_parameters(p).values())
    assert grad_check(lambda: cross_entropy(predict(Tensor(x), p), y), params) < 1e-4


def test_contribution_spot_check():
    h = np.array([[[1.0, -3.0], [0.0, 0.0], [2.0, 2.0]]])  # per-channel mean |h|: 2, 0, 2
    out = export_contribution(h, ["a", "b", "c"])
    assert out == {"channels": ["a", "b", "c"], "scores": [1.0, 0.0, 1.0]}


def test_contribution_all_equal_is_ones():
    out = export_contribution(np.ones((2, 3, 4)), ["a", "b", "c"])
    assert out["scores"] == [1.0, 1.0, 1.0]


def test_contribution_errors_and_file(tmp_path):
    with pytest.raises(ValueError):
        export_contribution(np.zeros((0, 3, 2)), ["a", "b", "c"])
    with pytest.raises(ShapeError):
        export_contribution(np.ones((1, 3, 2)), ["a", "b"])
    cfg, p = classifier()
    h = graph_features(Tensor(np.random.default_rng(0).normal(size=(4, cfg.channels, cfg.bands))), p)
    contrib = export_contribution(h, [f"ch{i}" for i in range(cfg.channels)])
    save_contribution(contrib, tmp_path / "c.json")
    loaded = json.loads((tmp_path / "c.json").read_text())
    assert loaded == contrib and min(loaded["scores"]) == 0.0 and max(loaded["scores"]) == 1.0
