"""Temporal splits, Table-1-style metrics, coverage/accuracy curves, report files."""

import math
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sizecast.baseline import ArticleReturnCounts, BaselineModel, CustomerKde, fit_baseline
from sizecast.domain import Catalog, OrdersDataset, ReturnStatus
from sizecast.errors import EvalError
from sizecast.evaluation import (
    CURVES_HEADER,
    METRICS_HEADER,
    MODE_JOINT,
    MODE_JOINT_PARAM,
    TemporalFold,
    avg_log_joint,
    coverage_accuracy_curve,
    emit_report,
    run_evaluation,
    temporal_splits,
)
from sizecast.predict import joint_log_prob, joint_table
from tests.conftest import mk_article, mk_order, ts

GAP = timedelta(days=21)


def spread_dataset(days: int = 365, per_day: int = 1) -> OrdersDataset:
    orders = []
    serial = 0
    for d in range(days):
        for j in range(per_day):
            orders.append(
                mk_order(f"o{serial:05d}", f"c{serial % 7}", "a1", 41.0, days=d + j / per_day)
            )
            serial += 1
    return OrdersDataset(orders=tuple(orders))


class TestTemporalSplits:
    def test_year_three_folds(self):
        folds = temporal_splits(spread_dataset(), n_folds=3, gap_days=21, val_days=28)
        assert len(folds) == 3
        windows = []
        for fold in folds:
            assert len(fold.validation) > 0 and len(fold.train) > 0
            val_ts = [o.timestamp for o in fold.validation.orders]
            train_ts = [o.timestamp for o in fold.train.orders]
            assert max(train_ts) + GAP <= min(val_ts)
            windows.append((min(val_ts), max(val_ts)))
        # pairwise-disjoint validation windows, oldest fold first
        for (lo_a, hi_a), (lo_b, hi_b) in zip(windows, windows[1:]):
            assert hi_a < lo_b

    def test_single_fold_holdout(self):
        folds = temporal_splits(spread_dataset(), n_folds=1, gap_days=21, val_days=28)
        assert len(folds) == 1
        fold = folds[0]
        assert len(fold.train) + len(fold.validation) < len(spread_dataset())

    def test_span_too_short(self):
        with pytest.raises(EvalError, match="span"):
            temporal_splits(spread_dataset(days=60), n_folds=3, gap_days=21, val_days=28)

    @settings(max_examples=40, deadline=None)
    @given(
        day_offsets=st.lists(st.floats(min_value=0.0, max_value=400.0), min_size=2, max_size=40),
        n_folds=st.integers(min_value=1, max_value=4),
        gap_days=st.integers(min_value=1, max_value=30),
        val_days=st.integers(min_value=7, max_value=45),
    )
    def test_fold_hygiene_property(self, day_offsets, n_folds, gap_days, val_days):
        orders = tuple(
            mk_order(f"o{i}", f"c{i % 5}", "a1", 41.0, days=d)
            for i, d in enumerate(sorted(day_offsets))
        )
        dataset = OrdersDataset(orders=orders)
        try:
            folds = temporal_splits(dataset, n_folds, gap_days=gap_days, val_days=val_days)
        except EvalError:
            span = orders[-1].timestamp - orders[0].timestamp
            assert span < timedelta(days=n_folds * val_days + gap_days)
            return
        assert len(folds) == n_folds
        seen_val_ids: set[str] = set()
        for fold in folds:
            val_ts = [o.timestamp for o in fold.validation.orders]
            train_ts = [o.timestamp for o in fold.train.orders]
            if val_ts and train_ts:
                assert max(train_ts) + timedelta(days=gap_days) <= min(val_ts)
            ids = {o.order_id for o in fold.validation.orders}
            assert not ids & seen_val_ids
            seen_val_ids |= ids


def uniform_model(bandwidth: float = 1e7) -> BaselineModel:
    # near-flat global KDE and a uniform return simplex: every cell ~= 1/(3k)
    return BaselineModel(
        customers={},
        articles={},
        global_sizes=CustomerKde(sizes=(41.5,), bandwidth=bandwidth),
        global_returns=ArticleReturnCounts(),
        h_min=0.5,
    )


class TestAvgLogJoint:
    def test_uniform_cells_give_log_one_twelfth(self):
        catalog = Catalog(articles={"a4": mk_article("a4", sizes=(40.0, 41.0, 42.0, 43.0))})
        validation = OrdersDataset(
            orders=tuple(
                mk_order(f"o{i}", f"c{i}", "a4", 40.0 + (i % 4), days=i) for i in range(8)
            )
        )
        fold = TemporalFold(train=OrdersDataset(orders=()), validation=validation, gap_days=21)
        got = avg_log_joint(uniform_model(), fold, catalog)
        assert got == pytest.approx(-2.4849066497880004, abs=1e-6)

    def test_exclusion_drops_unknown_customers(self, tiny_dataset, tiny_catalog):
        model = fit_baseline(tiny_dataset)
        validation = OrdersDataset(
            orders=(
                mk_order("v1", "c1", "a1", 42.0, ReturnStatus.KEPT, days=60),
                mk_order("v2", "ghost", "a1", 41.0, ReturnStatus.KEPT, days=61),
            )
        )
        fold = TemporalFold(train=tiny_dataset, validation=validation, gap_days=21)
        incl = avg_log_joint(model, fold, tiny_catalog, include_unknown_customers=True)
        excl = avg_log_joint(model, fold, tiny_catalog, include_unknown_customers=False)
        only_known = joint_log_prob(
            joint_table(model, "c1", "a1", tiny_catalog), 42.0, ReturnStatus.KEPT
        )
        assert excl == pytest.approx(only_known, abs=1e-12)
        assert incl != pytest.approx(excl, abs=1e-9)

    def test_empty_after_exclusion_raises(self, tiny_dataset, tiny_catalog):
        model = fit_baseline(tiny_dataset)
        validation = OrdersDataset(
            orders=(mk_order("v1", "ghost", "a1", 41.0, ReturnStatus.KEPT, days=60),)
        )
        fold = TemporalFold(train=tiny_dataset, validation=validation, gap_days=21)
        with pytest.raises(EvalError):
            avg_log_joint(model, fold, tiny_catalog, include_unknown_customers=False)

    def test_off_grid_observed_size_raises(self, tiny_dataset, tiny_catalog):
        model = fit_baseline(tiny_dataset)
        validation = OrdersDataset(
            orders=(mk_order("v1", "c1", "a1", 41.25, ReturnStatus.KEPT, days=60),)
        )
        fold = TemporalFold(train=tiny_dataset, validation=validation, gap_days=21)
        with pytest.raises(EvalError):
            avg_log_joint(model, fold, tiny_catalog)


class TestCoverageAccuracyCurve:
    @pytest.fixture()
    def engineered_fold(self, tiny_catalog):
        train = OrdersDataset(
            orders=tuple(
                mk_order(f"t{i}", "c1", "a1", 42.0, ReturnStatus.KEPT, days=i) for i in range(8)
            )
        )
        validation = OrdersDataset(
            orders=(
                mk_order("v1", "c1", "a1", 42.0, ReturnStatus.KEPT, days=60),
                mk_order("v2", "c1", "a1", 40.0, ReturnStatus.TOO_BIG, days=61),
            )
        )
        return TemporalFold(train=train, validation=validation, gap_days=21)

    def test_zero_thresholds_full_coverage(self, engineered_fold, tiny_catalog):
        model = fit_baseline(engineered_fold.train)
        points = coverage_accuracy_curve(
            model, engineered_fold, tiny_catalog, thresholds=(0.0,), mode=MODE_JOINT
        )
        assert points[0].coverage == 1.0
        # one of the two validation orders matches the argmax prediction
        assert points[0].accuracy == pytest.approx(0.5)

    def test_coverage_monotone_and_modes(self, small, small_fit):
        dataset, catalog, _ = small
        folds = temporal_splits(dataset, n_folds=1)
        for mode in (MODE_JOINT, MODE_JOINT_PARAM):
            points = coverage_accuracy_curve(small_fit, folds[0], catalog, mode=mode)
            coverages = [p.coverage for p in points]
            assert all(a >= b for a, b in zip(coverages, coverages[1:]))
            assert coverages[0] == 1.0

    def test_param_mode_rejected_for_baseline(self, engineered_fold, tiny_catalog):
        model = fit_baseline(engineered_fold.train)
        with pytest.raises(EvalError):
            coverage_accuracy_curve(
                model, engineered_fold, tiny_catalog, mode=MODE_JOINT_PARAM
            )

    def test_unsorted_thresholds_rejected(self, engineered_fold, tiny_catalog):
        model = fit_baseline(engineered_fold.train)
        with pytest.raises(EvalError):
            coverage_accuracy_curve(
                model, engineered_fold, tiny_catalog, thresholds=(0.4, 0.2)
            )

    def test_unknown_mode_rejected(self, engineered_fold, tiny_catalog):
        model = fit_baseline(engineered_fold.train)
        with pytest.raises(EvalError):
            coverage_accuracy_curve(model, engineered_fold, tiny_catalog, mode="bogus")

    def test_zero_coverage_has_no_accuracy(self, engineered_fold, tiny_catalog):
        model = fit_baseline(engineered_fold.train)
        points = coverage_accuracy_curve(
            model, engineered_fold, tiny_catalog, thresholds=(1.0,), mode=MODE_JOINT
        )
        assert points[0].coverage == 0.0
        assert points[0].accuracy is None


@pytest.fixture(scope="module")
def report(small):
    dataset, catalog, _ = small
    return run_evaluation(
        dataset, catalog, n_folds=2, thresholds=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0), seed=0
    )


class TestRunEvaluationAndEmit:
    def test_metric_cardinality(self, report):
        assert len(report.metrics) == 4 * report.n_folds
        combos = {(m.fold, m.model, m.customers) for m in report.metrics}
        assert len(combos) == 4 * report.n_folds
        assert {m.model for m in report.metrics} == {"baseline", "hbayes"}
        assert {m.customers for m in report.metrics} == {"incl", "excl"}

    def test_curve_series(self, report):
        series = {(p.model, p.mode) for p in report.curves}
        assert series == {
            ("baseline", MODE_JOINT),
            ("hbayes", MODE_JOINT),
            ("hbayes", MODE_JOINT_PARAM),
        }

    def test_elbo_traces_monotone(self, report):
        assert set(report.elbo_traces) == set(range(report.n_folds))
        for trace in report.elbo_traces.values():
            diffs = np.diff(np.array(trace))
            assert np.all(diffs >= -1e-6)

    def test_summary_structure(self, report):
        summary = report.summary()
        assert summary["n_folds"] == report.n_folds
        stats = summary["models"]["hbayes"]["excl"]
        assert len(stats["per_fold"]) == report.n_folds
        assert stats["mean"] == pytest.approx(
            sum(stats["per_fold"]) / report.n_folds, abs=1e-12
        )
        assert set(summary["unknown_customer_purchases"]) == {
            str(i) for i in range(report.n_folds)
        }

    def test_emit_files_and_determinism(self, report, tmp_path):
        first_dir = tmp_path / "one"
        second_dir = tmp_path / "two"
        paths = emit_report(report, first_dir)
        names = {p.name for p in paths}
        assert names == {"metrics.csv", "curves.csv", "summary.json"}
        emit_report(report, second_dir)
        for name in sorted(names):
            a = (first_dir / name).read_bytes()
            b = (second_dir / name).read_bytes()
            assert a == b

    def test_csv_shapes(self, report, tmp_path):
        emit_report(report, tmp_path)
        metrics_lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert metrics_lines[0] == METRICS_HEADER
        assert len(metrics_lines) == 1 + 4 * report.n_folds
        curves_lines = (tmp_path / "curves.csv").read_text().splitlines()
        assert curves_lines[0] == CURVES_HEADER
        assert len(curves_lines) == 1 + len(report.curves)
        # zero-coverage points carry an empty accuracy field, still 5 columns
        n_cols = len(CURVES_HEADER.split(","))
        for line in curves_lines[1:]:
            assert len(line.split(",")) == n_cols

    def test_empty_validation_window_raises(self, tiny_catalog):
        orders = tuple(
            mk_order(f"o{i}", "c1", "a1", 42.0, days=d)
            for i, d in enumerate([0, 1, 2, 150, 151, 152, 153, 158, 159, 160])
        )
        with pytest.raises(EvalError, match="fold"):
            run_evaluation(OrdersDataset(orders=orders), tiny_catalog, n_folds=2)
