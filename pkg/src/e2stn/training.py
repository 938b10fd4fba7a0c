"""Joint optimisation of the transfer, evaluation and classifier losses."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .classifier import ClassifierParams, cross_entropy, graph_features, one_hot, predict
from .config import TrainConfig
from .params import named_parameters
from .rng import make_rng
from .tensor import NonFiniteError, Tensor, no_grad
from .transfer import TransferParams, stylize
from .transfer_eval import EvalConvParams, conv_features, content_from_features, style_from_features

logger = logging.getLogger(__name__)

LOSS_KEYS = ("L", "L_c", "L_s", "L_id", "L_ce")


class TrainingDiverged(FloatingPointError):
    """The joint loss or its gradient stopped being finite."""


@dataclass
class ModelParams:
    classifier: ClassifierParams
    transfer: TransferParams | None = None
    evaluator: EvalConvParams | None = None

    @classmethod
    def init(cls, cfg: TrainConfig) -> ModelParams:
        cfg.validate()
        rng = make_rng(cfg.seed, "init")
        classifier = ClassifierParams.init(rng, cfg.model)
        if cfg.no_transfer:
            return cls(classifier)
        transfer = TransferParams.init(rng, cfg.model)
        evaluator = EvalConvParams.init(rng, cfg.model)
        return cls(classifier, transfer, evaluator)

    def named(self) -> dict[str, Tensor]:
        """Every array, frozen or not, keyed by a stable dotted name."""
        out = named_parameters(self.classifier, "classifier")
        if self.transfer is not None:
            out.update(named_parameters(self.transfer, "transfer"))
        if self.evaluator is not None:
            out.update(named_parameters(self.evaluator, "evaluator"))
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named().items() if v.requires_grad}


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _split(t: Tensor, n: int, parts: int) -> list[Tensor]:
    return [T.take(t, slice(i * n, (i + 1) * n)) for i in range(parts)]


def joint_loss(x_s, y_s, x_t, params: ModelParams, cfg: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    """``L = L_c + lambda*L_s + nu*L_id + xi*L_ce`` on one paired batch.

    ``y_s`` holds integer source labels. Target trials arrive as bare arrays;
    no target label is ever passed in. The stylised batch, both self-transfer
    batches and all conv features are computed in one stacked pass each.
    """
    x_s, x_t = T.as_tensor(x_s), T.as_tensor(x_t)
    targets = one_hot(y_s, cfg.model.classes)
    if cfg.no_transfer or params.transfer is None:
        l_ce = cross_entropy(predict(x_s, params.classifier), targets)
        return l_ce, {"L": l_ce.item(), "L_c": 0.0, "L_s": 0.0, "L_id": 0.0, "L_ce": l_ce.item()}

    n = x_s.shape[0]
    out = stylize(T.concat([x_s, x_s, x_t]), T.concat([x_t, x_s, x_t]), params.transfer)
    x_hat, _, _ = _split(out, n, 3)
    feats = conv_features(T.concat([out, x_s, x_t]), params.evaluator)
    blocks = list(zip(*[_split(f, n, 5) for f in feats]))
    f_hat, f_ss, f_tt, f_s, f_t = (list(b) for b in blocks)
    norm = params.evaluator.normalize

    l_c = content_from_features(f_hat, f_s, norm)
    l_s = style_from_features(f_hat, f_t, norm)
    l_id = T.add(content_from_features(f_ss, f_s, norm), content_from_features(f_tt, f_t, norm))
    # equal-sized halves, so the batch mean is the average of the two CE terms
    probs = predict(T.concat([x_s, x_hat]), params.classifier)
    l_ce = cross_entropy(probs, np.concatenate([targets, targets]))

    total = T.add(
        T.add(l_c, T.scalar_mul(l_s, cfg.lambda_)),
        T.add(T.scalar_mul(l_id, cfg.nu), T.scalar_mul(l_ce, cfg.xi)),
    )
    parts = {"L": total.item(), "L_c": l_c.item(), "L_s": l_s.item(), "L_id": l_id.item(), "L_ce": l_ce.item()}
    return total, parts


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place to a global l2 norm of at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def train_step(x_s, y_s, x_t, params: ModelParams, opt: AdamState, cfg: TrainConfig,
               lr: float | None = None) -> dict[str, float]:
    """One clipped Adam step on every trainable array. Returns the loss components."""
    trainable = params.trainable()
    for p in trainable.values():
        p.grad = None
    try:
        loss, parts = joint_loss(x_s, y_s, x_t, params, cfg)
        loss.backward()
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite forward/backward at step {opt.step + 1}: {exc}") from exc
    grads = {k: (np.zeros(p.shape) if p.grad is None else p.grad) for k, p in trainable.items()}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged(f"non-finite gradient at step {opt.step + 1}; components {parts}")
    parts["grad_norm"] = clip_gradients(grads, cfg.grad_clip)
    adam_update(trainable, grads, opt, cfg.learning_rate if lr is None else lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return parts


def pair_batches(source_pool: Sequence | int, target_pool: Sequence | int, batch_size: int,
                 rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of index pairs.

    Source indices are a fresh permutation (each trial exactly once); target
    indices are drawn uniformly with replacement. Pairing is positional.
    """
    ns = source_pool if isinstance(source_pool, int) else len(source_pool)
    nt = target_pool if isinstance(target_pool, int) else len(target_pool)
    if ns < 1 or nt < 1:
        raise ValueError("cannot pair batches from an empty pool")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(ns)
    for start in range(0, ns, batch_size):
        src = order[start:start + batch_size]
        yield src, rng.integers(0, nt, size=len(src))


def predict_labels(x: np.ndarray, params: ModelParams, chunk: int = 512) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), chunk):
            out.append(predict(Tensor(x[i:i + chunk]), params.classifier).data.argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def graph_activations(x: np.ndarray, params: ModelParams, chunk: int = 512) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), chunk):
            out.append(graph_features(Tensor(x[i:i + chunk]), params.classifier).data)
    return np.concatenate(out)


@dataclass
class TrainResult:
    params: ModelParams
    opt: AdamState
    history: list[dict[str, float]]
    epoch: int
    rng_state: dict
    best_epoch: int


def _snapshot(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.named().items()}


def _restore(params: ModelParams, snap: dict[str, np.ndarray]) -> None:
    for k, v in params.named().items():
        v.data = snap[k].copy()


def train(source_x: np.ndarray, source_y: np.ndarray, target_x: np.ndarray, cfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit a model on labelled source trials plus an unlabelled target pool.

    With ``cfg.no_transfer`` only the classifier is built and the target pool
    is ignored. A ``val_fraction`` slice of the source set drives model
    selection; the weights with the best validation accuracy are returned.
    """
    from .rng import rng_state

    cfg.validate()
    source_x = np.asarray(source_x, dtype=np.float64)
    source_y = np.asarray(source_y, dtype=np.int64)
    target_x = np.asarray(target_x, dtype=np.float64)
    params = ModelParams.init(cfg)
    if cfg.no_transfer:
        assert params.transfer is None and params.evaluator is None
    opt = AdamState()

    split_rng = make_rng(cfg.seed, "split")
    order = split_rng.permutation(len(source_x))
    n_val = int(round(cfg.val_fraction * len(source_x)))
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    xs_tr, ys_tr = source_x[train_idx], source_y[train_idx]
    xs_val, ys_val = source_x[val_idx], source_y[val_idx]

    pair_rng = make_rng(cfg.seed, "pairing")
    if params.transfer is not None and cfg.model.dropout > 0:
        params.transfer.dropout_rng = make_rng(cfg.seed, "dropout")
    steps_per_epoch = math.ceil(len(xs_tr) / cfg.batch_size)
    total_steps = max(1, steps_per_epoch * cfg.epochs)

    history: list[dict[str, float]] = []
    best_acc, best_epoch, best = -math.inf, 0, _snapshot(params)
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        count = 0
        for src, tgt in pair_batches(len(xs_tr), len(target_x), cfg.batch_size, pair_rng):
            lr = cfg.learning_rate
            if cfg.lr_schedule == "cosine":
                lr *= 0.5 * (1.0 + math.cos(math.pi * opt.step / total_steps))
            parts = train_step(xs_tr[src], ys_tr[src], target_x[tgt], params, opt, cfg, lr)
            for k in LOSS_KEYS:
                sums[k] += parts[k] * len(src)
            count += len(src)
        row = {"epoch": epoch, **{k: sums[k] / count for k in LOSS_KEYS}}
        if n_val:
            row["val_acc"] = float(np.mean(predict_labels(xs_val, params) == ys_val))
        else:
            row["val_acc"] = float("nan")
        history.append(row)
        logger.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items()})
        if on_epoch is not None:
            on_epoch(row)
        score = row["val_acc"] if n_val else -row["L"]
        if score > best_acc:
            best_acc, best_epoch, best = score, epoch, _snapshot(params)
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    if cfg.epochs:
        _restore(params, best)
    if params.transfer is not None:
        params.transfer.dropout_rng = None
    return TrainResult(params, opt, history, len(history), rng_state(pair_rng), best_epoch)


def clone_params(params: ModelParams) -> ModelParams:
    return copy.deepcopy(params)
