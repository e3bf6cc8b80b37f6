"""Experiment protocols: nested-CV classification benchmarks and the
missingness-robustness regression study.

Both protocols guard strictly against leakage: imputation statistics,
normalization, feature clustering, and threshold selection are always fit
on training rows only. Every training run derives its seed from the
master seed plus its position in the protocol, so parallel and serial
execution produce identical reports.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .clustering import (
    SIGNED,
    Dendrogram,
    FeatureClustering,
    complete_linkage,
    correlation_distance,
    cut_dendrogram,
    fraction_for_k,
    trivial_clustering,
)
from .data import CLASSIFICATION, REGRESSION, Dataset, assign_folds, fit_column_stats, impute_and_normalize, make_fold_plan
from .errors import DivergenceError, EmptyTestSetError, ShapeMismatchError
from .network import (
    PER_BRANCH,
    SplitNetwork,
    TrainConfig,
    build_split_network,
    evaluate,
    train_network,
)

VANILLA = "vanilla"
SPLIT = "split"

ACCURACY = "accuracy"
RMSE = "rmse"


def fit_clustering(data: Dataset, rows, threshold_fraction, mode=SIGNED) -> FeatureClustering:
    """Distance + complete linkage + cut, fit on the given rows only."""
    dist = correlation_distance(data, rows, mode)
    tree = complete_linkage(dist)
    return cut_dendrogram(tree, threshold_fraction)


def fit_dendrogram(data: Dataset, rows, mode=SIGNED) -> Dendrogram:
    return complete_linkage(correlation_distance(data, rows, mode))


@dataclass
class TrainedModel:
    """A trained network plus the preprocessing fit on its training rows."""

    network: SplitNetwork
    stats: object
    curves: object
    final_train_metric: float
    final_val_metric: float | None


def train_model(train_rows, val_rows, data: Dataset, clustering, config: TrainConfig,
                head_mode=PER_BRANCH) -> TrainedModel:
    """Fit stats on train rows, train for config.epochs, report metrics.

    ``clustering=None`` trains the vanilla network (all features in one
    50-unit branch, i.e. a split of one). Validation rows only produce
    metric curves; nothing about training depends on them.
    """
    train_rows = np.asarray(train_rows, dtype=np.int64)
    if clustering is None:
        clustering = trivial_clustering(data.n_features)
    stats = fit_column_stats(data, train_rows)
    z = impute_and_normalize(data, stats)
    output_dim = data.num_classes if data.task == CLASSIFICATION else 1
    net = build_split_network(
        clustering, data.task, output_dim, config.total_hidden, config.seed, head_mode
    )
    x_val = y_val = None
    if val_rows is not None:
        val_rows = np.asarray(val_rows, dtype=np.int64)
        x_val, y_val = z[val_rows], data.labels[val_rows]
    curves = train_network(net, z[train_rows], data.labels[train_rows], config, x_val, y_val)
    final_train = evaluate(net, z[train_rows], data.labels[train_rows])
    final_val = evaluate(net, x_val, y_val) if val_rows is not None else None
    return TrainedModel(net, stats, curves, final_train, final_val)


def score_rows(model: TrainedModel, data: Dataset, rows):
    """Metric on held-out rows, imputed/normalized with the model's stats."""
    rows = np.asarray(rows, dtype=np.int64)
    z = impute_and_normalize(data, model.stats)
    return evaluate(model.network, z[rows], data.labels[rows])


@dataclass
class ExperimentReport:
    """Per-fold metrics plus aggregate mean/std (population convention)."""

    dataset: str
    model: str
    per_fold_metric: list
    mean: float
    std: float
    metric: str
    config_snapshot: dict = field(default_factory=dict)
    wall_time_seconds: float = 0.0

    def __post_init__(self):
        if self.per_fold_metric:
            mean = float(np.mean(self.per_fold_metric))
            std = float(np.std(self.per_fold_metric))
            if abs(mean - self.mean) > 1e-12 or abs(std - self.std) > 1e-12:
                raise ValueError("stored mean/std disagree with per_fold_metric")
        if self.metric == ACCURACY and any(not 0 <= m <= 1 for m in self.per_fold_metric):
            raise ValueError("accuracy must lie in [0, 1]")
        if self.metric == RMSE and any(m < 0 for m in self.per_fold_metric):
            raise ValueError("rmse must be nonnegative")

    @classmethod
    def from_fold_metrics(cls, dataset, model, metrics, metric, snapshot, wall_time=0.0):
        return cls(
            dataset=dataset,
            model=model,
            per_fold_metric=[float(m) for m in metrics],
            mean=float(np.mean(metrics)) if len(metrics) else float("nan"),
            std=float(np.std(metrics)) if len(metrics) else float("nan"),
            metric=metric,
            config_snapshot=snapshot,
            wall_time_seconds=wall_time,
        )

    def to_dict(self):
        """Canonical serializable form; volatile timing is excluded so
        re-runs of the same config produce byte-identical report files."""
        return {
            "dataset": self.dataset,
            "model": self.model,
            "per_fold_metric": self.per_fold_metric,
            "mean": self.mean,
            "std": self.std,
            "metric": self.metric,
            "config_snapshot": self.config_snapshot,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            dataset=payload["dataset"],
            model=payload["model"],
            per_fold_metric=list(payload["per_fold_metric"]),
            mean=payload["mean"],
            std=payload["std"],
            metric=payload["metric"],
            config_snapshot=dict(payload.get("config_snapshot", {})),
        )


@dataclass
class FoldOutcome:
    fold: int
    metric: float | None
    threshold: float | None
    k: int | None
    failed: bool = False
    error: str = ""
    trained: TrainedModel | None = None  # populated only when keep_model is set


def _train_with_retry(train_rows, val_rows, data, clustering, config, master_seed, fold):
    try:
        return train_model(train_rows, val_rows, data, clustering, config)
    except DivergenceError:
        retry_seed = seeding.derive_seed(master_seed, seeding.RETRY, fold, 1)
        return train_model(train_rows, val_rows, data, clustering, replace(config, seed=retry_seed))


def _run_outer_fold(args):
    """One outer fold of the nested CV (module-level for process pools)."""
    (data, assignments, fold, base, model, grid, fixed_threshold,
     distance_mode, num_inner, keep_model) = args
    master = base.seed
    train_rows = np.flatnonzero(assignments != fold)
    test_rows = np.flatnonzero(assignments == fold)

    threshold = None
    clustering = None
    if model == SPLIT:
        if fixed_threshold is not None:
            threshold = float(fixed_threshold)
        else:
            threshold = _select_threshold(
                data, train_rows, base, fold, grid, distance_mode, num_inner
            )
        clustering = fit_clustering(data, train_rows, threshold, distance_mode)

    config = replace(
        base, seed=seeding.derive_seed(master, seeding.OUTER_TRAIN, fold), curve_every=0
    )
    try:
        trained = _train_with_retry(train_rows, None, data, clustering, config, master, fold)
    except DivergenceError as exc:
        return FoldOutcome(fold, None, threshold, None, failed=True, error=str(exc))
    metric = score_rows(trained, data, test_rows)
    k = trained.network.k
    return FoldOutcome(fold, metric, threshold, k, trained=trained if keep_model else None)


def _select_threshold(data, train_rows, base, fold, grid, distance_mode, num_inner):
    """Inner CV over the threshold grid; ties go to the smaller fraction.

    Every candidate threshold is evaluated with the same derived seeds
    (paired comparison); clustering and stats are refit on each inner
    training subset.
    """
    master = base.seed
    inner_assign = assign_folds(
        data.labels[train_rows],
        num_inner,
        seeding.derive_seed(master, seeding.INNER_PLAN, fold),
        stratified=data.task == CLASSIFICATION,
    )
    best_threshold = None
    best_score = None
    for threshold in sorted(grid):
        scores = []
        for g in range(num_inner):
            fit_rows = train_rows[inner_assign != g]
            val_rows = train_rows[inner_assign == g]
            clustering = fit_clustering(data, fit_rows, threshold, distance_mode)
            config = replace(
                base,
                seed=seeding.derive_seed(master, seeding.INNER_TRAIN, fold, g),
                curve_every=0,
            )
            trained = _train_with_retry(fit_rows, val_rows, data, clustering, config, master, fold)
            scores.append(trained.final_val_metric)
        score = float(np.mean(scores))
        better = best_score is None or (
            score > best_score if data.task == CLASSIFICATION else score < best_score
        )
        if better:
            best_score = score
            best_threshold = threshold
    return best_threshold


def double_cross_validate(
    data: Dataset,
    config: TrainConfig,
    threshold_grid=(0.3, 0.5, 0.7, 0.9),
    model=SPLIT,
    distance_mode=SIGNED,
    num_outer=5,
    num_inner=5,
    fixed_threshold=None,
    jobs=1,
) -> ExperimentReport:
    """Nested cross-validation; the inner loop selects the cut threshold.

    The outer loop scores on each outer fold after refitting clustering,
    imputation stats, normalization, and the model on the full outer
    training set with the selected threshold. Vanilla runs skip the inner
    loop (there is nothing to select). config.seed is the master seed.
    """
    if data.task != CLASSIFICATION:
        raise ShapeMismatchError("double_cross_validate expects a classification dataset")
    started = time.perf_counter()
    plan = make_fold_plan(data, num_outer, num_inner, config.seed)
    job_args = [
        (data, plan.assignments, fold, config, model, tuple(threshold_grid),
         fixed_threshold, distance_mode, num_inner, False)
        for fold in range(num_outer)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_outer_fold, job_args))
    else:
        outcomes = [_run_outer_fold(a) for a in job_args]

    metrics = [o.metric for o in outcomes if not o.failed]
    snapshot = {
        "dataset": data.name,
        "model": model,
        "task": data.task,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "epochs": config.epochs,
        "total_hidden": config.total_hidden,
        "master_seed": config.seed,
        "num_outer": num_outer,
        "num_inner": num_inner,
        "distance_mode": distance_mode,
        "threshold_grid": list(threshold_grid),
        "fixed_threshold": fixed_threshold,
        "selected_thresholds": [o.threshold for o in outcomes],
        "k_per_fold": [o.k for o in outcomes],
        "failed_folds": [o.fold for o in outcomes if o.failed],
    }
    return ExperimentReport.from_fold_metrics(
        data.name, model, metrics, ACCURACY, snapshot,
        wall_time=time.perf_counter() - started,
    )


def missing_row_partition(data: Dataset):
    """(rows with >= 1 missing feature, fully observed rows)."""
    has_missing = ~data.mask.all(axis=1)
    return np.flatnonzero(has_missing), np.flatnonzero(~has_missing)


def robustness_experiment(
    data: Dataset,
    config: TrainConfig,
    threshold_fraction=0.5,
    distance_mode=SIGNED,
    k_override=None,
    holdout_fraction=0.2,
):
    """Test on every row with missing features; train on the complete rest.

    Complete rows are split 80-20 train/val by a seeded shuffle. Stats,
    clustering, and both models are fit on the train split only; the
    missing-feature test rows are imputed with train means. Returns
    (vanilla report, split report), each carrying val and test RMSE.
    """
    if data.task != REGRESSION:
        raise ShapeMismatchError("robustness_experiment expects a regression dataset")
    started = time.perf_counter()
    test_rows, complete_rows = missing_row_partition(data)
    if len(test_rows) == 0:
        raise EmptyTestSetError("dataset has no rows with missing features")
    if len(complete_rows) < 10:
        raise ShapeMismatchError("too few complete rows for an 80-20 split")
    master = config.seed
    rng = seeding.generator(master, seeding.HOLDOUT_SPLIT)
    shuffled = rng.permutation(complete_rows)
    n_train = int((1.0 - holdout_fraction) * len(shuffled))
    train_rows = np.sort(shuffled[:n_train])
    val_rows = np.sort(shuffled[n_train:])

    tree = fit_dendrogram(data, train_rows, distance_mode)
    if k_override is not None:
        threshold_fraction = fraction_for_k(tree, k_override)
    clustering = cut_dendrogram(tree, threshold_fraction)

    train_config = replace(
        config, seed=seeding.derive_seed(master, seeding.OUTER_TRAIN, 0), curve_every=0
    )
    reports = []
    for model_name, cl in ((VANILLA, None), (SPLIT, clustering)):
        trained = _train_with_retry(train_rows, val_rows, data, cl, train_config, master, 0)
        val_rmse = trained.final_val_metric
        test_rmse = score_rows(trained, data, test_rows)
        snapshot = {
            "dataset": data.name,
            "model": model_name,
            "task": data.task,
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "epochs": config.epochs,
            "total_hidden": config.total_hidden,
            "master_seed": master,
            "distance_mode": distance_mode,
            "threshold_fraction": float(clustering.threshold_fraction) if cl else None,
            "k": trained.network.k,
            "val_rmse": val_rmse,
            "test_rmse": test_rmse,
            "test_fraction": len(test_rows) / data.n_rows,
            "n_train": int(len(train_rows)),
            "n_val": int(len(val_rows)),
        }
        reports.append(
            ExperimentReport.from_fold_metrics(
                data.name, model_name, [test_rmse], RMSE, snapshot,
                wall_time=time.perf_counter() - started,
            )
        )
    return tuple(reports)


def aggregate_report(reports):
    """Machine-readable rows plus an aligned text table.

    All reports must share one metric; the best mean per dataset is
    flagged (highest accuracy, lowest rmse).
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    metrics = {r.metric for r in reports}
    if len(metrics) > 1:
        raise ValueError(f"refusing to mix metrics in one table: {sorted(metrics)}")
    metric = metrics.pop()
    best = {}
    for r in reports:
        current = best.get(r.dataset)
        if current is None:
            best[r.dataset] = r.mean
        elif metric == ACCURACY:
            best[r.dataset] = max(current, r.mean)
        else:
            best[r.dataset] = min(current, r.mean)
    rows = []
    for r in reports:
        rows.append(
            {
                "dataset": r.dataset,
                "model": r.model,
                "mean": r.mean,
                "std": r.std,
                "metric": metric,
                "k_values": r.config_snapshot.get("k_per_fold", [r.config_snapshot.get("k")]),
                "best": r.mean == best[r.dataset],
            }
        )
    header = f"{'dataset':<16} {'model':<9} {metric + ' (mean ± std)':<24} {'k':<18} best"
    lines = [header, "-" * len(header)]
    for row in rows:
        kcol = ",".join("?" if k is None else str(k) for k in row["k_values"])
        flag = "*" if row["best"] else ""
        lines.append(
            f"{row['dataset']:<16} {row['model']:<9} "
            f"{row['mean']:.3f} ± {row['std']:.3f}{'':<10} {kcol:<18} {flag}"
        )
    return rows, "\n".join(lines)
