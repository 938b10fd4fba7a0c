"""Command-line entry point: ``e2stn <command> [options]``.

Failures print one line ``error: <category>: <message>`` to stderr. Usage
problems (bad flags, unreadable config, incompatible dimensions) exit with 2,
everything else with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .classifier import export_contribution, save_contribution
from .config import ConfigError, TrainConfig
from .data import (FOUR_CLASS, THREE_CLASS, DataFormatError, ProtocolError, ProtocolSpec, SyntheticSpec,
                   build_protocol, generate_synthetic, load_dataset, write_dataset)
from .evaluation import (DegenerateTestError, FoldResult, build_report, read_metrics_csv, write_confusion_csv,
                         write_metrics_csv)
from .experiments import benchmark_config, run_ablation
from .tensor import NonFiniteError, ShapeError
from .training import TrainingDiverged, graph_activations, train

logger = logging.getLogger("e2stn")


class UsageError(Exception):
    """Raised for invalid command-line input detected after parsing."""


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON TrainConfig file; flags below override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--no-transfer", action="store_true", help="source-only classifier (ablation)")
    p.add_argument("--lambda", dest="lambda_", type=float, help="style loss weight")
    p.add_argument("--nu", type=float, help="identity loss weight")
    p.add_argument("--xi", type=float, help="classification loss weight")
    p.add_argument("--attn-scale", type=_on_off, metavar="on|off")
    p.add_argument("--freeze-eval-conv", type=_on_off, metavar="on|off")
    p.add_argument("--tiny", action="store_true", help="use the tiny test architecture")


def build_config(args: argparse.Namespace, base: TrainConfig | None = None) -> TrainConfig:
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        cfg = TrainConfig.load(args.config)
    else:
        cfg = base or TrainConfig()
    changes = {k: getattr(args, k) for k in ("seed", "epochs", "batch_size", "learning_rate", "lambda_", "nu", "xi")
               if getattr(args, k, None) is not None}
    if getattr(args, "no_transfer", False):
        changes["no_transfer"] = True
    cfg = cfg.replace(**changes)
    model = cfg.model
    if getattr(args, "tiny", False):
        from .config import ModelConfig
        model = ModelConfig.tiny(channels=model.channels, bands=model.bands, classes=model.classes)
    if getattr(args, "attn_scale", None) is not None:
        model = _replace(model, attn_scale=args.attn_scale)
    if getattr(args, "freeze_eval_conv", None) is not None:
        model = _replace(model, freeze_eval_conv=args.freeze_eval_conv)
    cfg = cfg.replace(model=model)
    cfg.validate()
    return cfg


def _replace(obj, **changes):
    import dataclasses
    return dataclasses.replace(obj, **changes)


def _classes(n: int) -> tuple[str, ...]:
    return THREE_CLASS if n == 3 else FOUR_CLASS


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> None:
    spec = SyntheticSpec(**_read_json(args.spec, "synthetic spec")) if args.spec else SyntheticSpec()
    if args.subjects is not None:
        spec.subjects = args.subjects
    if args.trials_per_class is not None:
        spec.trials_per_class = args.trials_per_class
    source, target = generate_synthetic(spec, args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for trials, stem in ((source, "source"), (target, "target")):
        path = write_dataset(trials, args.out_dir, stem)
        print(path)


def _load_pair(source: Path, target: Path):
    for p in (source, target):
        if not p.exists():
            raise UsageError(f"dataset manifest not found: {p}")
    return load_dataset(source).load(), load_dataset(target).load()


def _train_folds(run_dir: Path, cfg: TrainConfig, source_path: Path, target_path: Path,
                 classes: int, subjects: list[int] | None) -> None:
    source, target = _load_pair(source_path, target_path)
    if source.shape != (cfg.model.channels, cfg.model.bands):
        raise ShapeError(f"model is configured for {(cfg.model.channels, cfg.model.bands)} trials, "
                         f"data has {source.shape}")
    if classes != cfg.model.classes:
        raise ShapeError(f"protocol has {classes} classes, model has {cfg.model.classes}")
    protocol = ProtocolSpec(classes=_classes(classes), target_subjects=subjects)
    run_dir.mkdir(parents=True, exist_ok=True)
    folds = list(build_protocol(protocol, source, target))
    _write_json(run_dir / "config.json", cfg.to_dict())
    _write_json(run_dir / "run.json", {
        "source": str(source_path.resolve()), "target": str(target_path.resolve()),
        "classes": list(protocol.classes), "target_subjects": [f.target_subject for f in folds],
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    })
    for fold in folds:
        fold_dir = run_dir / f"fold-{fold.target_subject}"
        fold_dir.mkdir(exist_ok=True)
        result = train(fold.source.x, fold.source.labels, fold.target_pool.x, cfg)
        save_checkpoint(Checkpoint.from_result(result, cfg), fold_dir / "checkpoint.e2stn")
        write_metrics_csv(result.history, fold_dir / "metrics.csv")
        logger.info("fold %d trained (%d epochs, best %d)", fold.target_subject, result.epoch, result.best_epoch)


def cmd_train(args) -> None:
    cfg = build_config(args)
    _train_folds(args.out_dir, cfg, args.source, args.target, args.classes, args.target_subject)
    print(args.out_dir)


def _run_info(run_dir: Path) -> dict:
    return _read_json(run_dir / "run.json", "run description")


def _folds_for_run(run_dir: Path):
    info = _run_info(run_dir)
    source, target = _load_pair(Path(info["source"]), Path(info["target"]))
    protocol = ProtocolSpec(classes=tuple(info["classes"]), target_subjects=info["target_subjects"])
    return info, list(build_protocol(protocol, source, target))


def evaluate_run(run_dir: Path) -> list[FoldResult]:
    from .evaluation import evaluate

    info, folds = _folds_for_run(run_dir)
    out = []
    for fold in folds:
        fold_dir = run_dir / f"fold-{fold.target_subject}"
        ckpt = load_checkpoint(fold_dir / "checkpoint.e2stn")
        res = evaluate(ckpt.model(), fold.target_eval.x, fold.target_eval.labels, fold.target_subject)
        _write_json(fold_dir / "eval.json", {"target_subject": res.target_subject, "accuracy": res.accuracy,
                                             "confusion": res.confusion.tolist()})
        write_confusion_csv(res, info["classes"], fold_dir / "confusion.csv")
        out.append(res)
    return out


def cmd_eval(args) -> None:
    for res in evaluate_run(args.run):
        print(f"subject {res.target_subject}: accuracy {res.accuracy:.4f}")


def make_report(run_dir: Path) -> dict:
    info = _run_info(run_dir)
    cfg = _read_json(run_dir / "config.json", "run config")
    folds, histories = [], {}
    for subject in info["target_subjects"]:
        fold_dir = run_dir / f"fold-{subject}"
        ev = _read_json(fold_dir / "eval.json", "fold evaluation (run `eval` first)")
        folds.append(FoldResult(ev["target_subject"], ev["accuracy"], np.asarray(ev["confusion"], dtype=np.int64)))
        histories[subject] = read_metrics_csv(fold_dir / "metrics.csv")
    report = build_report(folds, histories, cfg, info["classes"], created=info["created"])
    _write_json(run_dir / "report.json", report)
    return report


def cmd_report(args) -> None:
    report = make_report(args.run)
    print(f"ACC {100 * report['mean_acc']:.2f} / STD {100 * report['std_acc']:.2f} "
          f"over {len(report['folds'])} folds")


def cmd_ablate(args) -> None:
    overrides = _read_json(args.config, "config") if args.config else {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs

    def cfg_for_seed(seed):
        d = dict(overrides)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return benchmark_config(seed, **d)

    spec = SyntheticSpec()
    if args.subjects is not None:
        spec.subjects = args.subjects
    outcome = run_ablation(args.seeds, spec, cfg_for_seed)
    summary = outcome.summary()
    summary["caveat"] = "normality of paired differences not tested; t-test run unconditionally"
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(args.out_dir / "ablation.json", summary)
    print(f"full {100 * summary['full_mean']:.2f} vs source-only {100 * summary['ablated_mean']:.2f} "
          f"({summary['gain_points']:+.2f} points, one-sided p={summary['p_one_sided']})")


def _sweep_worker(job: dict) -> dict:
    run_dir = Path(job["run_dir"])
    cfg = TrainConfig.from_dict(job["config"])
    _train_folds(run_dir, cfg, Path(job["source"]), Path(job["target"]), job["classes"], job["subjects"])
    evaluate_run(run_dir)
    report = make_report(run_dir)
    return {"run_dir": str(run_dir), "lambda": cfg.lambda_, "nu": cfg.nu, "xi": cfg.xi,
            "mean_acc": report["mean_acc"], "std_acc": report["std_acc"]}


def sweep_workers() -> int:
    raw = os.environ.get("E2STN_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"E2STN_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError("E2STN_THREADS must be >= 1")
    return n


def cmd_sweep(args) -> None:
    base = build_config(args)
    jobs = []
    for lam in args.lambda_values or [base.lambda_]:
        for nu in args.nu_values or [base.nu]:
            for xi in args.xi_values or [base.xi]:
                cfg = base.replace(lambda_=lam, nu=nu, xi=xi)
                jobs.append({"run_dir": str(args.out_dir / f"lambda{lam:g}-nu{nu:g}-xi{xi:g}"),
                             "config": cfg.to_dict(), "source": str(args.source), "target": str(args.target),
                             "classes": args.classes, "subjects": args.target_subject})
    workers = min(sweep_workers(), len(jobs))
    if workers == 1:
        rows = [_sweep_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_worker, jobs))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(args.out_dir / "sweep.json", {"runs": rows})
    for r in rows:
        print(f"lambda={r['lambda']:g} nu={r['nu']:g} xi={r['xi']:g}: ACC {100 * r['mean_acc']:.2f}")


def cmd_contribution(args) -> None:
    info, folds = _folds_for_run(args.run)
    source = load_dataset(Path(info["source"])).load()
    for fold in folds:
        fold_dir = args.run / f"fold-{fold.target_subject}"
        params = load_checkpoint(fold_dir / "checkpoint.e2stn").model()
        # activations of the unlabelled target trials; labels are not needed here
        h = graph_activations(fold.target_pool.x, params)
        save_contribution(export_contribution(h, source.channel_names), fold_dir / "contribution.json")
        print(fold_dir / "contribution.json")


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="e2stn", description="EEG style-transfer emotion recognition toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write the synthetic source/target datasets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--spec", type=Path, help="JSON overrides for the synthetic generator")
    p.add_argument("--subjects", type=int)
    p.add_argument("--trials-per-class", type=int)
    p.set_defaults(func=cmd_gen_synthetic)

    def data_flags(q):
        q.add_argument("--source", type=Path, required=True, help="source dataset manifest")
        q.add_argument("--target", type=Path, required=True, help="target dataset manifest")
        q.add_argument("--classes", type=int, choices=(3, 4), default=3)
        q.add_argument("--target-subject", type=int, action="append", help="restrict to these subjects")
        q.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("train", help="train one model per target subject")
    data_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "score every fold of a run"),
                             ("report", cmd_report, "aggregate a run into report.json"),
                             ("contribution", cmd_contribution, "export electrode contribution maps")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--run", type=Path, required=True, help="run directory written by `train`")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="full model vs source-only classifier on the synthetic benchmark")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--config", type=Path, help="JSON overrides of the benchmark settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--subjects", type=int, help="subjects per synthetic domain")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over the loss weights")
    data_flags(p)
    _add_train_flags(p)
    p.add_argument("--lambda-values", type=float, nargs="+")
    p.add_argument("--nu-values", type=float, nargs="+")
    p.add_argument("--xi-values", type=float, nargs="+")
    p.set_defaults(func=cmd_sweep)
    return parser


USAGE_ERRORS = (UsageError, ConfigError, ShapeError, json.JSONDecodeError)
RUNTIME_ERRORS = {
    DataFormatError: "data-format",
    ProtocolError: "protocol",
    CheckpointError: "checkpoint",
    TrainingDiverged: "diverged",
    NonFiniteError: "non-finite",
    DegenerateTestError: "degenerate-test",
    OSError: "io",
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except USAGE_ERRORS as exc:
        category = "config" if isinstance(exc, (ConfigError, json.JSONDecodeError)) else \
            "shape" if isinstance(exc, ShapeError) else "usage"
        print(f"error: {category}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except tuple(RUNTIME_ERRORS) as exc:
        category = next(v for k, v in RUNTIME_ERRORS.items() if isinstance(exc, k))
        print(f"error: {category}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
