import struct

import numpy as np
import pytest

from e2stn.checkpoint import (MAGIC, Checkpoint, CheckpointError, from_bytes, load_checkpoint, save_checkpoint,
                              to_bytes)
from e2stn.config import ModelConfig, TrainConfig
from e2stn.rng import restore_rng
from e2stn.tensor import ShapeError
from e2stn.training import predict_labels, train


def trained(epochs=2, **kw):
    cfg = TrainConfig(model=ModelConfig.tiny(), epochs=epochs, batch_size=8, **kw)
    rng = np.random.default_rng(0)
    xs, xt = rng.normal(size=(20, 4, 3)), rng.normal(size=(10, 4, 3))
    ys = np.arange(20) % 3
    return cfg, train(xs, ys, xt, cfg), xs


def test_save_load_save_bit_identical(tmp_path):
    cfg, res, _ = trained()
    ckpt = Checkpoint.from_result(res, cfg)
    save_checkpoint(ckpt, tmp_path / "a.e2stn")
    again = load_checkpoint(tmp_path / "a.e2stn")
    save_checkpoint(again, tmp_path / "b.e2stn")
    assert (tmp_path / "a.e2stn").read_bytes() == (tmp_path / "b.e2stn").read_bytes()


def test_loaded_model_predicts_identically(tmp_path):
    cfg, res, xs = trained()
    save_checkpoint(Checkpoint.from_result(res, cfg), tmp_path / "m.e2stn")
    ckpt = load_checkpoint(tmp_path / "m.e2stn")
    assert np.array_equal(predict_labels(xs, ckpt.model()), predict_labels(xs, res.params))
    opt = ckpt.optimizer()
    assert opt.step == res.opt.step and set(opt.m) == set(res.opt.m)
    assert ckpt.epoch == 2 and ckpt.config_hash == cfg.config_hash()
    a, b = restore_rng(ckpt.rng_state), restore_rng(res.rng_state)
    assert np.array_equal(a.integers(0, 1 << 30, 8), b.integers(0, 1 << 30, 8))


def test_layout_header():
    cfg, res, _ = trained(epochs=1, no_transfer=True)
    raw = to_bytes(Checkpoint.from_result(res, cfg))
    assert raw[:6] == MAGIC == b"E2STN\0"
    assert struct.unpack("<H", raw[6:8]) == (1,)
    (meta_len,) = struct.unpack("<I", raw[8:12])
    (count,) = struct.unpack("<I", raw[12 + meta_len:16 + meta_len])
    assert count == len(res.params.named()) + 2 * len(res.opt.m)


def test_identical_runs_give_identical_bytes():
    cfg, a, _ = trained()
    _, b, _ = trained()
    assert to_bytes(Checkpoint.from_result(a, cfg)) == to_bytes(Checkpoint.from_result(b, cfg))


def test_corruption_detected():
    cfg, res, _ = trained(epochs=1, no_transfer=True)
    raw = to_bytes(Checkpoint.from_result(res, cfg))
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"X" + raw[1:])
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(raw[:6] + struct.pack("<H", 9) + raw[8:])


def test_dimension_mismatch_on_restore():
    cfg, res, _ = trained(epochs=1, no_transfer=True)
    ckpt = Checkpoint.from_result(res, cfg)
    ckpt.config = cfg.replace(model=ModelConfig.tiny(gcn_out=5))
    with pytest.raises(ShapeError):
        ckpt.model()
