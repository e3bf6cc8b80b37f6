"""Command-line entry point.

Subcommands: cluster, benchmark, robustness, gradcheck, report. Every
run resolves its configuration (defaults < config file < flags), writes
the resolved config next to its outputs, and emits deterministic report
files: re-running from a resolved config reproduces them byte for byte
on the same platform, including with --jobs > 1. Timings go to stdout
only, never into report files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels, seeding
from .clustering import SIGNED, ABSOLUTE, cut_dendrogram, export_assignment, export_dendrogram
from .data import REGRESSION, load_dataset
from .errors import SplitnnError
from .experiments import (
    ACCURACY,
    RMSE,
    SPLIT,
    VANILLA,
    ExperimentReport,
    aggregate_report,
    double_cross_validate,
    fit_dendrogram,
    robustness_experiment,
)
from .network import TrainConfig, random_gradient_check_suite

DEFAULTS = {
    "model": "both",
    "distance_mode": SIGNED,
    "threshold": 0.5,
    "grid": [0.3, 0.5, 0.7, 0.9],
    "fixed_threshold": False,
    "learning_rate": 0.01,
    "batch_size": 100,
    "epochs": 1000,
    "total_hidden": 50,
    "num_outer": 5,
    "num_inner": 5,
    "seed": 1,
    "jobs": 1,
    "backend": "auto",
    "out": "runs",
}

_LIST_KEYS = {"datasets", "schemas", "grid"}
_INT_KEYS = {"batch_size", "epochs", "total_hidden", "num_outer", "num_inner", "seed", "jobs"}
_FLOAT_KEYS = {"threshold", "learning_rate"}
_BOOL_KEYS = {"fixed_threshold"}


def read_config_file(path):
    """Flat ``key = value`` pairs; '#' starts a comment."""
    values = {}
    path = Path(path)
    if not path.exists():
        raise SplitnnError(f"config file not found: {path}")
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SplitnnError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _coerce(key, value):
    if isinstance(value, str):
        if key in _LIST_KEYS:
            items = [v.strip() for v in value.split(",") if v.strip()]
            return [float(v) for v in items] if key == "grid" else items
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS:
            return value.lower() in ("yes", "true", "1")
    return value


def resolve_config(args):
    """defaults < config file < command-line flags."""
    merged = dict(DEFAULTS)
    merged["datasets"] = []
    merged["schemas"] = []
    if args.config:
        for key, value in read_config_file(args.config).items():
            merged[key] = _coerce(key, value)
    for key in list(DEFAULTS) + ["datasets", "schemas"]:
        flag = getattr(args, key, None)
        if flag not in (None, []):
            merged[key] = _coerce(key, flag) if isinstance(flag, str) else flag
    if getattr(args, "fixed_threshold", None):
        merged["fixed_threshold"] = True
    # pin the concrete backend so a resolved config cannot silently fall
    # back to different numerics on re-run
    merged["backend"] = kernels.resolve_backend(merged["backend"]).NAME
    return merged


def write_resolved_config(cfg, out_dir, command):
    lines = [f"command = {command}"]
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "yes" if value else "no"
        lines.append(f"{key} = {value}")
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


def _resolve_schema(dataset_path, schema_spec):
    if schema_spec and schema_spec != "auto":
        schema_path = Path(schema_spec)
    else:
        schema_path = Path(dataset_path).with_suffix(".schema")
    if not schema_path.exists():
        raise FileNotFoundError(f"schema file not found: {schema_path}")
    return schema_path


def _dataset_pairs(cfg):
    datasets = cfg.get("datasets") or []
    if not datasets:
        raise SplitnnError("no dataset given (use --dataset or 'datasets =' in the config)")
    schemas = cfg.get("schemas") or []
    if schemas and len(schemas) not in (0, len(datasets)):
        raise SplitnnError("--schema count must match --dataset count")
    pairs = []
    for i, ds in enumerate(datasets):
        spec = schemas[i] if i < len(schemas) else "auto"
        pairs.append((Path(ds), _resolve_schema(ds, spec)))
    return pairs


def _out_dir(cfg, command):
    out = Path(cfg["out"]) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_reports(reports, out_dir):
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in reports]
    (out_dir / "reports.jsonl").write_text("\n".join(lines) + "\n")


def _train_config(cfg):
    return TrainConfig(
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        total_hidden=cfg["total_hidden"],
    )


def cmd_cluster(cfg):
    pairs = _dataset_pairs(cfg)
    out = _out_dir(cfg, "cluster")
    write_resolved_config(cfg, out, "cluster")
    for ds_path, schema_path in pairs:
        data = load_dataset(ds_path, schema_path)
        tree = fit_dendrogram(data, np.arange(data.n_rows), cfg["distance_mode"])
        clustering = cut_dendrogram(tree, cfg["threshold"])
        export_dendrogram(tree, out / f"{data.name}.dendrogram.txt")
        export_assignment(clustering, data.feature_names, out / f"{data.name}.assignment.txt")
        sizes = ",".join(str(s) for s in clustering.cluster_sizes)
        print(f"{data.name}: d={data.n_features} threshold={cfg['threshold']} "
              f"k={clustering.k} cluster_sizes=[{sizes}]")
    return 0


def cmd_benchmark(cfg):
    pairs = _dataset_pairs(cfg)
    out = _out_dir(cfg, "benchmark")
    write_resolved_config(cfg, out, "benchmark")
    models = [VANILLA, SPLIT] if cfg["model"] == "both" else [cfg["model"]]
    fixed = cfg["threshold"] if cfg["fixed_threshold"] else None
    reports, failures = [], []
    for ds_path, schema_path in pairs:
        try:
            data = load_dataset(ds_path, schema_path)
            for model in models:
                started = time.perf_counter()
                report = double_cross_validate(
                    data,
                    _train_config(cfg),
                    threshold_grid=cfg["grid"],
                    model=model,
                    distance_mode=cfg["distance_mode"],
                    num_outer=cfg["num_outer"],
                    num_inner=cfg["num_inner"],
                    fixed_threshold=fixed,
                    jobs=cfg["jobs"],
                )
                reports.append(report)
                print(f"[{data.name}/{model}] mean={report.mean:.3f} std={report.std:.3f} "
                      f"({time.perf_counter() - started:.1f}s)")
        except (SplitnnError, OSError) as exc:
            failures.append((str(ds_path), str(exc)))
            print(f"[{ds_path}] FAILED: {exc}", file=sys.stderr)
    if reports:
        _write_reports(reports, out)
        _, table = aggregate_report(reports)
        print(table)
    return 1 if failures else 0


def cmd_robustness(cfg):
    pairs = _dataset_pairs(cfg)
    out = _out_dir(cfg, "robustness")
    write_resolved_config(cfg, out, "robustness")
    exit_code = 0
    for ds_path, schema_path in pairs:
        data = load_dataset(ds_path, schema_path)
        if data.task != REGRESSION:
            print(f"[{data.name}] robustness needs a regression dataset", file=sys.stderr)
            exit_code = 1
            continue
        config = _train_config(cfg)
        vanilla, split_auto = robustness_experiment(
            data, config, threshold_fraction=cfg["threshold"],
            distance_mode=cfg["distance_mode"],
        )
        _, split_k2 = robustness_experiment(
            data, config, distance_mode=cfg["distance_mode"], k_override=2,
        )
        reports = [vanilla, split_auto, split_k2]
        _write_reports(reports, out)
        frac = vanilla.config_snapshot["test_fraction"]
        print(f"{data.name}: test fraction {frac:.3f} "
              f"({int(frac * data.n_rows)} rows with missing features)")
        print(f"{'model':<16} {'k':>3} {'val rmse':>10} {'test rmse':>10}")
        for r in reports:
            snap = r.config_snapshot
            label = r.model if r.model == VANILLA else f"{r.model} (k={snap['k']})"
            print(f"{label:<16} {snap['k']:>3} {snap['val_rmse']:>10.3f} {snap['test_rmse']:>10.3f}")
    return exit_code


def cmd_gradcheck(cfg, count, epsilon):
    worst = random_gradient_check_suite(count=count, epsilon=epsilon, seed=cfg["seed"])
    print(f"gradient check: {count} random split networks, worst relative error {worst:.3e}")
    if worst < 1e-4:
        print("PASS (threshold 1e-4)")
        return 0
    print("FAIL (threshold 1e-4)")
    return 1


def cmd_report(cfg, input_path):
    path = Path(input_path) if input_path else Path(cfg["out"]) / "benchmark" / "reports.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"report file not found: {path}")
    reports = [ExperimentReport.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
    for metric in (ACCURACY, RMSE):
        group = [r for r in reports if r.metric == metric]
        if group:
            _, table = aggregate_report(group)
            print(table)
            print()
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="splitnn",
        description="Feature-clustered split neural networks for tabular data with missing values",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--dataset", dest="datasets", action="append", default=[],
                       help="dataset csv (repeatable)")
        p.add_argument("--schema", dest="schemas", action="append", default=[],
                       help="schema path per dataset, or 'auto' (sibling .schema)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--distance-mode", dest="distance_mode", choices=[SIGNED, ABSOLUTE])
        p.add_argument("--threshold", type=float)
        p.add_argument("--backend", choices=["auto", "numpy", "cython"])
        if training:
            p.add_argument("--model", choices=["both", VANILLA, SPLIT])
            p.add_argument("--grid")
            p.add_argument("--fixed-threshold", dest="fixed_threshold", action="store_true", default=None)
            p.add_argument("--jobs", type=int)
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--learning-rate", dest="learning_rate", type=float)
            p.add_argument("--hidden", dest="total_hidden", type=int)
            p.add_argument("--num-outer", dest="num_outer", type=int)
            p.add_argument("--num-inner", dest="num_inner", type=int)

    common(sub.add_parser("cluster", help="export dendrogram and cluster assignment"), training=False)
    common(sub.add_parser("benchmark", help="nested-CV classification benchmark"))
    common(sub.add_parser("robustness", help="missing-feature robustness experiment (regression)"))

    grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    grad.add_argument("--config")
    grad.add_argument("--seed", type=int)
    grad.add_argument("--count", type=int, default=50)
    grad.add_argument("--epsilon", type=float, default=1e-5)
    grad.add_argument("--backend", choices=["auto", "numpy", "cython"])

    rep = sub.add_parser("report", help="re-render stored reports")
    rep.add_argument("--config")
    rep.add_argument("--input", help="reports.jsonl path")
    rep.add_argument("--out")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        kernels.use_backend(cfg["backend"])
        if args.command == "cluster":
            return cmd_cluster(cfg)
        if args.command == "benchmark":
            return cmd_benchmark(cfg)
        if args.command == "robustness":
            return cmd_robustness(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.count, args.epsilon)
        if args.command == "report":
            return cmd_report(cfg, args.input)
        parser.error(f"unknown command {args.command}")
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SplitnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
