"""Shared fixtures: hand-built micro datasets plus session-scoped synthetic runs."""

import time
from datetime import datetime, timedelta, timezone

import pytest

from sizecast.domain import ArticleMeta, Catalog, Order, OrdersDataset, ReturnStatus
from sizecast.evaluation import run_evaluation
from sizecast.hbayes import fit_hbayes
from sizecast.synthgen import SynthConfig, sample_dataset

T0 = datetime(2021, 1, 1, tzinfo=timezone.utc)


def ts(days: float = 0.0) -> datetime:
    """Timestamp `days` after the shared epoch."""
    return T0 + timedelta(days=days)


def mk_order(
    oid: str,
    cid: str,
    aid: str,
    size: float,
    status: ReturnStatus = ReturnStatus.KEPT,
    days: float = 0.0,
) -> Order:
    return Order(oid, cid, aid, size, status, ts(days))


def mk_article(
    aid: str,
    sizes=tuple(float(s) for s in range(38, 49)),
    step: float = 1.0,
    brand: str = "b0",
    gender: str = "m",
) -> ArticleMeta:
    return ArticleMeta(
        article_id=aid,
        brand=brand,
        category="shoes",
        gender=gender,
        size_system="EU",
        sizes=tuple(sizes),
        step=step,
    )


@pytest.fixture()
def tiny_catalog() -> Catalog:
    """Two men's articles (different brands) and one women's article."""
    return Catalog(
        articles={
            "a1": mk_article("a1"),
            "a2": mk_article("a2", brand="b1"),
            "a3": mk_article("a3", sizes=tuple(float(s) for s in range(34, 45)), gender="w"),
        }
    )


@pytest.fixture()
def tiny_dataset() -> OrdersDataset:
    """Two customers, three articles, a mix of outcomes."""
    orders = (
        mk_order("o1", "c1", "a1", 42.0, ReturnStatus.KEPT, 0),
        mk_order("o2", "c1", "a1", 41.0, ReturnStatus.TOO_BIG, 1),
        mk_order("o3", "c1", "a2", 42.0, ReturnStatus.KEPT, 2),
        mk_order("o4", "c2", "a3", 38.0, ReturnStatus.KEPT, 3),
        mk_order("o5", "c2", "a3", 39.0, ReturnStatus.TOO_SMALL, 4),
        mk_order("o6", "c2", "a1", 44.0, ReturnStatus.KEPT, 5),
    )
    return OrdersDataset(orders=orders)


@pytest.fixture(scope="session")
def desk():
    """Desk-scale synthetic run: 200 customers, 50 articles, 20k orders, seed 1."""
    config = SynthConfig()
    dataset, catalog, truth = sample_dataset(config)
    return dataset, catalog, truth


@pytest.fixture(scope="session")
def desk_fit(desk):
    """HBayes fit on the desk dataset (fixed 30-sweep budget) plus wall time."""
    dataset, catalog, _ = desk
    start = time.perf_counter()
    state = fit_hbayes(dataset, catalog, tol=0.0, max_sweeps=30, seed=0)
    return state, time.perf_counter() - start


@pytest.fixture(scope="session")
def desk_eval(desk):
    """Temporal-CV evaluation on the desk dataset (default folds) plus wall time."""
    dataset, catalog, _ = desk
    start = time.perf_counter()
    report = run_evaluation(dataset, catalog)
    return report, time.perf_counter() - start


@pytest.fixture(scope="session")
def small():
    """Cheaper synthetic run for integration tests that refit models."""
    config = SynthConfig(n_customers=40, n_articles=10, n_orders=3000, n_brands=3, seed=3)
    dataset, catalog, truth = sample_dataset(config)
    return dataset, catalog, truth


@pytest.fixture(scope="session")
def small_fit(small):
    dataset, catalog, _ = small
    return fit_hbayes(dataset, catalog, tol=1e-4, max_sweeps=60, seed=0)
