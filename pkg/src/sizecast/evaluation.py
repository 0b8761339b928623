"""Temporal cross-validation harness and evaluation metrics.

Validation windows are carved from the end of the data backwards, pairwise
disjoint, and each fold trains only on orders at least `gap_days` older than
its validation window — mirroring the delay before a purchase's return
outcome is known. Metrics: average log joint probability of the observed
(size, outcome) pairs, and coverage/accuracy curves under recommendation
thresholds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path

import numpy as np

from . import baseline as baseline_mod
from . import hbayes as hbayes_mod
from .baseline import BaselineModel
from .domain import Catalog, IngestStats, OrdersDataset, format_float
from .errors import EvalError
from .hbayes import HBayesState, Hyperparams
from .predict import joint_table, joint_log_prob

DEFAULT_GAP_DAYS = 21
DEFAULT_VAL_DAYS = 28
DEFAULT_THRESHOLDS = tuple(round(0.02 * i, 2) for i in range(51))

MODE_JOINT = "joint"
MODE_JOINT_PARAM = "joint+param"

METRICS_HEADER = "fold,model,customers,avg_log_joint"
CURVES_HEADER = "model,mode,threshold,coverage,accuracy"


@dataclass(frozen=True)
class TemporalFold:
    """One train/validation split with a return-collection gap."""

    train: OrdersDataset
    validation: OrdersDataset
    gap_days: int


@dataclass(frozen=True)
class MetricRow:
    fold: int
    model: str
    customers: str  # "incl" | "excl" (unknown customers)
    avg_log_joint: float


@dataclass(frozen=True)
class CurvePoint:
    model: str
    mode: str
    threshold: float
    coverage: float
    accuracy: float | None  # undefined when nothing is covered


@dataclass(frozen=True)
class EvalReport:
    """Everything emit_report writes: per-fold metrics, pooled curves, counts."""

    metrics: tuple[MetricRow, ...]
    curves: tuple[CurvePoint, ...]
    unknown_counts: dict[int, int]
    n_folds: int
    gap_days: int
    val_days: int
    elbo_traces: dict[int, tuple[float, ...]] = field(default_factory=dict)

    def summary(self) -> dict:
        models: dict[str, dict] = {}
        for row in self.metrics:
            per_model = models.setdefault(row.model, {})
            per_cond = per_model.setdefault(
                row.customers, {"per_fold": [None] * self.n_folds}
            )
            per_cond["per_fold"][row.fold] = row.avg_log_joint
        for per_model in models.values():
            for per_cond in per_model.values():
                values = [v for v in per_cond["per_fold"] if v is not None]
                arr = np.asarray(values, dtype=float)
                per_cond["mean"] = float(arr.mean()) if values else None
                per_cond["std"] = float(arr.std(ddof=0)) if values else None
        return {
            "version": 1,
            "n_folds": self.n_folds,
            "gap_days": self.gap_days,
            "val_days": self.val_days,
            "models": models,
            "unknown_customer_purchases": {
                str(fold): count for fold, count in sorted(self.unknown_counts.items())
            },
        }


def temporal_splits(
    dataset: OrdersDataset,
    n_folds: int,
    gap_days: int = DEFAULT_GAP_DAYS,
    val_days: int = DEFAULT_VAL_DAYS,
) -> list[TemporalFold]:
    """Backtesting folds: disjoint validation windows walking back from the
    newest order, each trained on data ending `gap_days` before its window.

    Folds are returned oldest-first. Requires the data to span at least
    n_folds * val_days + gap_days days.
    """
    if n_folds < 1:
        raise EvalError("n_folds must be at least 1")
    if gap_days < 0 or val_days < 1:
        raise EvalError("gap_days must be >= 0 and val_days >= 1")
    if len(dataset) == 0:
        raise EvalError("cannot split an empty dataset")

    t_min, t_max = dataset.time_span()
    required = timedelta(days=n_folds * val_days + gap_days)
    span = t_max - t_min
    if span < required:
        raise EvalError(
            f"data spans {span} but temporal folds need at least {required} "
            f"(n_folds*val_days + gap_days = {n_folds}*{val_days} + {gap_days} days)"
        )

    gap = timedelta(days=gap_days)
    window = timedelta(days=val_days)
    end = t_max + timedelta(microseconds=1)  # half-open windows include the newest order
    folds: list[TemporalFold] = []
    for _ in range(n_folds):
        start = end - window
        cutoff = start - gap
        train = tuple(o for o in dataset.orders if o.timestamp <= cutoff)
        validation = tuple(o for o in dataset.orders if start <= o.timestamp < end)
        folds.append(
            TemporalFold(
                train=OrdersDataset(train, IngestStats(accepted=len(train))),
                validation=OrdersDataset(validation, IngestStats(accepted=len(validation))),
                gap_days=gap_days,
            )
        )
        end = start
    folds.reverse()
    return folds


def _model_kind(model: BaselineModel | HBayesState) -> str:
    return "baseline" if isinstance(model, BaselineModel) else "hbayes"


def _knows_customer(model: BaselineModel | HBayesState, customer_id: str) -> bool:
    if isinstance(model, BaselineModel):
        return customer_id in model.customers
    return customer_id in model.customer_index


class _TableCache:
    """Joint tables keyed by (known-customer id or None, article id)."""

    def __init__(self, model, catalog: Catalog) -> None:
        self.model = model
        self.catalog = catalog
        self._tables: dict[tuple[str | None, str], object] = {}

    def get(self, customer_id: str, article_id: str):
        key = (customer_id if _knows_customer(self.model, customer_id) else None, article_id)
        table = self._tables.get(key)
        if table is None:
            table = joint_table(self.model, customer_id, article_id, self.catalog)
            self._tables[key] = table
        return table


def avg_log_joint(
    model: BaselineModel | HBayesState,
    fold: TemporalFold,
    catalog: Catalog,
    include_unknown_customers: bool = True,
) -> float:
    """Mean log p(observed size, observed outcome) over the validation window.

    With include_unknown_customers off, validation purchases by customers
    absent from the fold's training data are excluded before averaging.
    """
    train_customers = fold.train.customer_ids()
    orders = [
        o
        for o in fold.validation.orders
        if include_unknown_customers or o.customer_id in train_customers
    ]
    if not orders:
        raise EvalError(
            "metric undefined: no validation orders to score"
            + ("" if include_unknown_customers else " after excluding unknown customers")
        )
    cache = _TableCache(model, catalog)
    total = math.fsum(
        joint_log_prob(cache.get(o.customer_id, o.article_id), o.size, o.status)
        for o in orders
    )
    return total / len(orders)


def _decision_summaries(
    model: BaselineModel | HBayesState, fold: TemporalFold, catalog: Catalog
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per validation order: best-cell probability, confidence, correctness.

    The decision is threshold-free here: the argmax size and the argmax
    outcome at that size. Thresholding happens per curve point.
    """
    cache = _TableCache(model, catalog)
    n = len(fold.validation.orders)
    p_star = np.empty(n)
    confidence = np.ones(n)
    correct = np.zeros(n, dtype=bool)
    for k, order in enumerate(fold.validation.orders):
        table = cache.get(order.customer_id, order.article_id)
        kept = table.kept_column()
        best = int(np.argmax(kept))
        p_star[k] = kept[best]
        if table.param_confidence is not None:
            confidence[k] = table.param_confidence
        predicted_status = int(np.argmax(table.probs[best]))
        observed = table.grid.index_of(order.size)
        if observed is None:
            raise EvalError(
                f"order {order.order_id}: size {order.size!r} is off the article grid"
            )
        correct[k] = (best == observed) and (predicted_status == order.status.index)
    return p_star, confidence, correct


def _curve_counts(
    summaries: tuple[np.ndarray, np.ndarray, np.ndarray],
    thresholds: tuple[float, ...],
    mode: str,
) -> tuple[int, np.ndarray, np.ndarray]:
    p_star, confidence, correct = summaries
    decided_counts = np.empty(len(thresholds), dtype=np.int64)
    correct_counts = np.empty(len(thresholds), dtype=np.int64)
    for j, tau in enumerate(thresholds):
        decided = p_star >= tau
        if mode == MODE_JOINT_PARAM:
            decided &= confidence >= tau
        decided_counts[j] = int(decided.sum())
        correct_counts[j] = int((decided & correct).sum())
    return p_star.size, decided_counts, correct_counts


def _validate_curve_inputs(model, thresholds, mode) -> None:
    if mode not in (MODE_JOINT, MODE_JOINT_PARAM):
        raise EvalError(f"unknown thresholding mode {mode!r}")
    if mode == MODE_JOINT_PARAM and isinstance(model, BaselineModel):
        raise EvalError("the baseline has no parameter posterior; use mode 'joint'")
    if list(thresholds) != sorted(thresholds):
        raise EvalError("thresholds must be sorted ascending")


def coverage_accuracy_curve(
    model: BaselineModel | HBayesState,
    fold: TemporalFold,
    catalog: Catalog,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    mode: str = MODE_JOINT,
) -> tuple[CurvePoint, ...]:
    """Coverage and accuracy per threshold on one fold's validation window.

    Coverage counts non-abstain decisions over all validation purchases;
    accuracy counts decisions whose size and outcome both match the
    observation, over decisions made. In mode "joint+param" the same
    threshold applies to both the joint probability and the parameter
    confidence (hierarchical model only).
    """
    _validate_curve_inputs(model, thresholds, mode)
    thresholds = tuple(thresholds)
    n, decided, correct = _curve_counts(
        _decision_summaries(model, fold, catalog), thresholds, mode
    )
    kind = _model_kind(model)
    points = []
    for j, tau in enumerate(thresholds):
        coverage = decided[j] / n
        accuracy = (correct[j] / decided[j]) if decided[j] > 0 else None
        points.append(CurvePoint(kind, mode, tau, coverage, accuracy))
    return tuple(points)


def run_evaluation(
    dataset: OrdersDataset,
    catalog: Catalog,
    n_folds: int = 3,
    gap_days: int = DEFAULT_GAP_DAYS,
    val_days: int = DEFAULT_VAL_DAYS,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    h_min: float = baseline_mod.DEFAULT_H_MIN,
    hyper: Hyperparams | None = None,
    tol: float = 1e-4,
    max_sweeps: int = 200,
    seed: int = 0,
    on_progress=None,
) -> EvalReport:
    """Full protocol: fit both models per fold, score both inclusion modes,
    and pool coverage/accuracy curves across folds (weighted by orders).
    """
    folds = temporal_splits(dataset, n_folds, gap_days, val_days)
    thresholds = tuple(thresholds)

    metrics: list[MetricRow] = []
    unknown_counts: dict[int, int] = {}
    elbo_traces: dict[int, tuple[float, ...]] = {}
    pooled: dict[tuple[str, str], tuple[int, np.ndarray, np.ndarray]] = {}

    for i, fold in enumerate(folds):
        if len(fold.train) == 0:
            raise EvalError(
                f"fold {i}: empty training window; reduce --folds or --val-days"
            )
        if len(fold.validation) == 0:
            raise EvalError(f"fold {i}: empty validation window")
        if on_progress:
            on_progress(f"fold {i}: fitting on {len(fold.train)} orders")
        models: dict[str, BaselineModel | HBayesState] = {
            "baseline": baseline_mod.fit_baseline(fold.train, h_min=h_min),
            "hbayes": hbayes_mod.fit_hbayes(
                fold.train, catalog, hyper=hyper, tol=tol, max_sweeps=max_sweeps, seed=seed
            ),
        }
        elbo_traces[i] = tuple(models["hbayes"].elbo_trace)

        train_customers = fold.train.customer_ids()
        unknown_counts[i] = sum(
            1 for o in fold.validation.orders if o.customer_id not in train_customers
        )
        for kind, model in models.items():
            for label, include in (("incl", True), ("excl", False)):
                metrics.append(
                    MetricRow(i, kind, label, avg_log_joint(model, fold, catalog, include))
                )
            summaries = _decision_summaries(model, fold, catalog)
            modes = (MODE_JOINT,) if kind == "baseline" else (MODE_JOINT, MODE_JOINT_PARAM)
            for mode in modes:
                n, decided, correct = _curve_counts(summaries, thresholds, mode)
                key = (kind, mode)
                if key in pooled:
                    n0, d0, c0 = pooled[key]
                    pooled[key] = (n0 + n, d0 + decided, c0 + correct)
                else:
                    pooled[key] = (n, decided, correct)
        if on_progress:
            on_progress(f"fold {i}: scored {len(fold.validation)} validation orders")

    curves: list[CurvePoint] = []
    for (kind, mode), (n, decided, correct) in sorted(pooled.items()):
        for j, tau in enumerate(thresholds):
            coverage = decided[j] / n
            accuracy = (correct[j] / decided[j]) if decided[j] > 0 else None
            curves.append(CurvePoint(kind, mode, tau, coverage, accuracy))

    return EvalReport(
        metrics=tuple(metrics),
        curves=tuple(curves),
        unknown_counts=unknown_counts,
        n_folds=n_folds,
        gap_days=gap_days,
        val_days=val_days,
        elbo_traces=elbo_traces,
    )


def emit_report(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Write metrics.csv, curves.csv, and summary.json with deterministic
    ordering and shortest round-trip float formatting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    metrics_path = out / "metrics.csv"
    with metrics_path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in sorted(report.metrics, key=lambda r: (r.fold, r.model, r.customers)):
            fh.write(
                f"{row.fold},{row.model},{row.customers},{format_float(row.avg_log_joint)}\n"
            )
    paths.append(metrics_path)

    curves_path = out / "curves.csv"
    with curves_path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(CURVES_HEADER + "\n")
        for pt in sorted(report.curves, key=lambda p: (p.model, p.mode, p.threshold)):
            acc = "" if pt.accuracy is None else format_float(pt.accuracy)
            fh.write(
                f"{pt.model},{pt.mode},{format_float(pt.threshold)},"
                f"{format_float(pt.coverage)},{acc}\n"
            )
    paths.append(curves_path)

    summary_path = out / "summary.json"
    with summary_path.open("w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    paths.append(summary_path)
    return paths
