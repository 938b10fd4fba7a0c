"""Architecture and training configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class ModelConfig:
    channels: int = 16
    bands: int = 5
    classes: int = 3
    # transfer module
    model_dim: int = 32
    heads: int = 4
    ffn_dim: int = 64
    encoder_layers: int = 1
    decoder_layers: int = 3
    attn_scale: bool = True
    residual: str = "query"  # "query" adds Q after attention; "input" adds the sublayer input
    cnn_hidden: int = 4
    dropout: float = 0.0
    ln_eps: float = 1e-5
    # transfer evaluation convs
    eval_f1: int = 8
    eval_depth: int = 2
    eval_f2: int = 16
    eval_elu: bool = True
    eval_bias: bool = False
    freeze_eval_conv: bool = True
    loss_normalize: bool = False
    # classifier
    cheb_order: int = 2
    gcn_out: int = 16
    fc_hidden: int = 64
    row_normalize: bool = True
    mix_orders: bool = True  # False drops the trainable order/band mixing and sums powers literally
    logit_clamp: float = 40.0

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def validate(self) -> None:
        for name in ("channels", "bands", "classes", "model_dim", "heads", "ffn_dim", "cnn_hidden",
                     "eval_f1", "eval_depth", "eval_f2", "gcn_out", "fc_hidden", "decoder_layers",
                     "encoder_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.cheb_order < 1:
            raise ConfigError(f"cheb_order must be >= 1, got {self.cheb_order}")
        if self.residual not in ("query", "input"):
            raise ConfigError(f"residual must be 'query' or 'input', got {self.residual!r}")
        if self.residual == "input" and self.bands != self.model_dim:
            raise ConfigError("residual='input' in the encoder needs bands == model_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.classes < 2:
            raise ConfigError("at least two classes are required")

    @classmethod
    def tiny(cls, **overrides) -> ModelConfig:
        base = dict(channels=4, bands=3, classes=3, model_dim=8, heads=2, ffn_dim=8, cnn_hidden=2,
                    eval_f1=2, eval_depth=2, eval_f2=3, cheb_order=2, gcn_out=4, fc_hidden=8)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lambda_: float = 1.0
    nu: float = 1.0
    xi: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    no_transfer: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    lr_schedule: str = "constant"
    val_fraction: float = 0.1
    patience: int = 0  # 0 keeps the best-validation weights but never stops early

    def validate(self) -> None:
        self.model.validate()
        for name in ("lambda_", "nu", "xi"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name.rstrip('_')} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        model = d.pop("model", {}) or {}
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        mknown = {f.name for f in dataclasses.fields(ModelConfig)}
        munknown = set(model) - mknown
        if munknown:
            raise ConfigError(f"unknown model config keys: {sorted(munknown)}")
        return cls(model=ModelConfig(**model), **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> TrainConfig:
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        return cls.from_json(Path(path).read_text())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)
