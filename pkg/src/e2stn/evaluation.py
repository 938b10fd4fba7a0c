"""Fold scoring, aggregation, paired significance testing and run reports."""

from __future__ import annotations

import csv
import math
import subprocess
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np
from scipy.special import betainc

from .tensor import ShapeError
from .training import LOSS_KEYS, ModelParams, predict_labels

SHAPIRO_CAVEAT = ("normality of the paired differences is not tested; "
                  "the t-test is run unconditionally")
METRIC_COLUMNS = ("epoch",) + LOSS_KEYS + ("val_acc",)


class DegenerateTestError(ValueError):
    """The paired differences have zero variance but are not all zero."""


@dataclass
class FoldResult:
    target_subject: int
    accuracy: float
    confusion: np.ndarray  # (P, P) counts, rows true, columns predicted

    @property
    def confusion_normalized(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1, keepdims=True)
        return np.divide(self.confusion, rows, out=np.zeros(self.confusion.shape), where=rows > 0)


def confusion_matrix(y_true, y_pred, classes: int) -> np.ndarray:
    y_true, y_pred = np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"{y_true.shape} labels vs {y_pred.shape} predictions")
    out = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(out, (y_true, y_pred), 1)
    return out


def accuracy_from_confusion(cm: np.ndarray) -> float:
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    return int(np.trace(cm)) / total


def evaluate(params: ModelParams, x: np.ndarray, labels: np.ndarray, target_subject: int = -1) -> FoldResult:
    """Classify every trial and score it against ``labels`` (read here only)."""
    x = np.asarray(x, dtype=np.float64)
    c, b = params.classifier.graph.bias.shape
    if x.ndim != 3 or x.shape[1:] != (c, b):
        raise ShapeError(f"model expects trials of shape ({c}, {b}), data has {x.shape[1:]}")
    classes = params.classifier.head.fc2_b.shape[0]
    cm = confusion_matrix(labels, predict_labels(x, params), classes)
    return FoldResult(int(target_subject), accuracy_from_confusion(cm), cm)


def aggregate(accuracies: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation over folds."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("cannot aggregate zero folds")
    mean = float(acc.mean())
    return mean, float(np.sqrt(np.mean((acc - mean) ** 2)))


def student_t_sf(t: float, df: int) -> float:
    """Upper tail ``P(T > t)`` of Student's t via the regularised incomplete beta."""
    tail = 0.5 * float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return tail if t >= 0 else 1.0 - tail


def paired_t_test(a: Sequence[float], b: Sequence[float], alternative: str = "two-sided") -> tuple[float, float]:
    """Paired t-test on ``a - b``.

    ``alternative`` is ``"two-sided"`` or ``"greater"`` (mean of ``a`` larger).
    Identical lists give ``(0.0, 1.0)``.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D lists of equal length")
    if a.size < 2:
        raise ValueError("a paired t-test needs at least two pairs")
    if alternative not in ("two-sided", "greater"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = a - b
    if np.all(d == 0):
        return 0.0, 1.0
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateTestError("paired differences are constant and non-zero; t is undefined")
    t = float(d.mean() / (sd / math.sqrt(n)))
    upper = student_t_sf(t, n - 1)
    if alternative == "greater":
        return t, upper
    return t, min(1.0, 2.0 * min(upper, 1.0 - upper))


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_metrics_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([int(row["epoch"])] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]])


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "epoch" else float(r[k])) for k in METRIC_COLUMNS} for r in rows]


def write_confusion_csv(fold: FoldResult, class_names: Sequence[str], path: str | Path) -> None:
    """Counts and row-normalised percentages, one line per (true, predicted) cell."""
    norm = fold.confusion_normalized
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true", "predicted", "count", "percent"])
        for i, ti in enumerate(class_names):
            for j, pj in enumerate(class_names):
                w.writerow([ti, pj, int(fold.confusion[i, j]), f"{100.0 * norm[i, j]:.4f}"])


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_MATRIX = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["folds", "mean_acc", "std_acc", "confusion", "loss_traces", "config", "fingerprint", "created"],
    "properties": {
        "folds": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["target_subject", "accuracy", "confusion"],
                "properties": {
                    "target_subject": {"type": "integer"},
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "confusion": _MATRIX,
                },
            },
        },
        "mean_acc": {"type": "number"},
        "std_acc": {"type": "number", "minimum": 0},
        "class_names": {"type": "array", "items": {"type": "string"}},
        "confusion": {
            "type": "object",
            "required": ["counts", "row_normalized"],
            "properties": {"counts": _MATRIX, "row_normalized": _MATRIX},
        },
        "loss_traces": {"type": "object"},
        "config": {"type": "object"},
        "fingerprint": {"type": "object"},
        "created": {"type": "string"},
        "significance": {"type": "object"},
    },
}


def fingerprint() -> dict:
    """Build identity of the code that produced a report (no timestamps)."""
    from importlib import metadata

    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        commit = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True,
                                text=True, timeout=10).stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        commit = "unknown"
    return {"package": "e2stn", "version": version, "git_commit": commit, "numpy": np.__version__}


def trace_columns(history: list[dict], no_transfer: bool) -> list[str]:
    """Loss columns worth reporting; the transfer terms are dropped for source-only runs."""
    cols = list(LOSS_KEYS) + ["val_acc"]
    if no_transfer:
        cols = [c for c in cols if c not in ("L_c", "L_s", "L_id")]
    return cols


def build_report(folds: list[FoldResult], histories: dict[int, list[dict]], config: dict,
                 class_names: Sequence[str], significance: dict | None = None,
                 created: str | None = None) -> dict:
    mean, std = aggregate([f.accuracy for f in folds])
    total = sum(f.confusion for f in folds)
    pooled = FoldResult(-1, accuracy_from_confusion(total), total)
    no_transfer = bool(config.get("no_transfer", False))
    traces = {}
    for subject, hist in sorted(histories.items()):
        cols = trace_columns(hist, no_transfer)
        traces[str(subject)] = {c: [_finite(row[c]) for row in hist] for c in ["epoch"] + cols}
    report = {
        "folds": [{"target_subject": f.target_subject, "accuracy": f.accuracy,
                   "confusion": f.confusion.tolist()} for f in folds],
        "mean_acc": mean,
        "std_acc": std,
        "std_convention": "population, across target subjects",
        "class_names": list(class_names),
        "confusion": {"counts": total.tolist(), "row_normalized": pooled.confusion_normalized.tolist()},
        "loss_traces": traces,
        "config": config,
        "fingerprint": fingerprint(),
        "created": created or datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if significance is not None:
        report["significance"] = significance
    jsonschema.validate(report, REPORT_SCHEMA)
    return report


def _finite(v):
    v = float(v)
    return v if math.isfinite(v) else None


def strip_volatile(report: dict) -> dict:
    """Copy of a report without fields that legitimately differ between identical runs."""
    return {k: v for k, v in report.items() if k != "created"}
