"""Baseline joint model: independent per-customer size KDE and per-article
smoothed return counts, with pooled global marginals for cold starts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Mapping

import numpy as np

from .domain import OrdersDataset, ReturnStatus
from .errors import ModelError
from .mixtures import GaussianMixture

DEFAULT_H_MIN = 0.5
GLOBAL_SUBSAMPLE_CAP = 100_000
_SUBSAMPLE_SEED = 0
_FORMAT_VERSION = 1


def kde_bandwidth(sizes: np.ndarray | list[float], h_min: float) -> float:
    """Rule-of-thumb bandwidth 0.9 * min(sd, IQR/1.34) * n^(-1/5), floored at h_min.

    Degenerate inputs (single point, zero spread) fall back to the floor, which
    keeps repeat buyers of one size from collapsing to a point mass.
    """
    arr = np.asarray(sizes, dtype=float)
    if arr.size == 0:
        raise ValueError("bandwidth needs at least one size")
    if not h_min > 0:
        raise ValueError("h_min must be positive")
    if arr.size == 1:
        return h_min
    sd = float(arr.std(ddof=1))
    q75, q25 = np.percentile(arr, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        return h_min
    return max(h_min, 0.9 * spread * arr.size ** (-0.2))


@dataclass(frozen=True)
class CustomerKde:
    """Sizes purchased by one account plus the kernel bandwidth."""

    sizes: tuple[float, ...]
    bandwidth: float

    def mixture(self) -> GaussianMixture:
        return GaussianMixture.kde(np.array(self.sizes), self.bandwidth)


@dataclass(frozen=True)
class ArticleReturnCounts:
    """Raw outcome counts for one article: kept / too-small / too-big."""

    n_kept: int = 0
    n_small: int = 0
    n_big: int = 0

    @property
    def total(self) -> int:
        return self.n_kept + self.n_small + self.n_big

    def as_array(self) -> np.ndarray:
        return np.array([self.n_kept, self.n_small, self.n_big], dtype=float)


def return_probs(counts: ArticleReturnCounts) -> np.ndarray:
    """Add-one smoothed outcome probabilities (n_r + 1) / (n + 3).

    Never returns 0 or 1 for any status, so validation log scores stay finite.
    """
    return (counts.as_array() + 1.0) / (counts.total + 3.0)


@dataclass(frozen=True)
class BaselineModel:
    """Fitted baseline: per-customer KDEs, per-article counts, global marginals."""

    customers: Mapping[str, CustomerKde]
    articles: Mapping[str, ArticleReturnCounts]
    global_sizes: CustomerKde
    global_returns: ArticleReturnCounts
    h_min: float

    @property
    def kind(self) -> str:
        return "baseline"


def fit_baseline(
    dataset: OrdersDataset,
    h_min: float = DEFAULT_H_MIN,
    subsample_cap: int = GLOBAL_SUBSAMPLE_CAP,
) -> BaselineModel:
    """One-pass fit: group sizes per customer, count outcomes per article.

    The global size marginal pools every purchase (uniformly subsampled past
    `subsample_cap` with a fixed internal seed, so fits stay reproducible).
    """
    if len(dataset) == 0:
        raise ModelError("cannot fit baseline on an empty dataset")

    sizes_by_customer: dict[str, list[float]] = {}
    counts_by_article: dict[str, list[int]] = {}
    for order in dataset.orders:
        sizes_by_customer.setdefault(order.customer_id, []).append(order.size)
        counts_by_article.setdefault(order.article_id, [0, 0, 0])[order.status.index] += 1

    customers = {
        cid: CustomerKde(sizes=tuple(sizes), bandwidth=kde_bandwidth(sizes, h_min))
        for cid, sizes in sizes_by_customer.items()
    }
    articles = {
        aid: ArticleReturnCounts(n_kept=c[0], n_small=c[1], n_big=c[2])
        for aid, c in counts_by_article.items()
    }

    pooled = np.array([o.size for o in dataset.orders], dtype=float)
    if pooled.size > subsample_cap:
        rng = np.random.default_rng(_SUBSAMPLE_SEED)
        pooled = np.sort(rng.choice(pooled, size=subsample_cap, replace=False))
    global_sizes = CustomerKde(sizes=tuple(pooled), bandwidth=kde_bandwidth(pooled, h_min))

    totals = np.zeros(3, dtype=int)
    for c in articles.values():
        totals += np.array([c.n_kept, c.n_small, c.n_big])
    global_returns = ArticleReturnCounts(*totals.tolist())

    return BaselineModel(
        customers=customers,
        articles=articles,
        global_sizes=global_sizes,
        global_returns=global_returns,
        h_min=h_min,
    )


def size_mixture(model: BaselineModel, customer_id: str) -> GaussianMixture:
    """The customer's KDE, or the pooled global marginal for unknown accounts."""
    kde = model.customers.get(customer_id)
    if kde is None:
        kde = model.global_sizes
    return kde.mixture()


def kde_density(model: BaselineModel, customer_id: str, size: float) -> float:
    return float(size_mixture(model, customer_id).pdf(size))


def article_return_probs(model: BaselineModel, article_id: str) -> np.ndarray:
    counts = model.articles.get(article_id)
    if counts is None:
        counts = model.global_returns
    return return_probs(counts)


def baseline_joint_density(
    model: BaselineModel, customer_id: str, article_id: str
) -> tuple[GaussianMixture, np.ndarray]:
    """Independent (size density, return simplex) pair, total over all id pairs."""
    return size_mixture(model, customer_id), article_return_probs(model, article_id)


def _kde_to_json(kde: CustomerKde) -> dict:
    return {"sizes": list(kde.sizes), "h": kde.bandwidth}


def _counts_to_json(c: ArticleReturnCounts) -> dict:
    return {"nK": c.n_kept, "nS": c.n_small, "nB": c.n_big}


def to_json(model: BaselineModel) -> dict:
    return {
        "version": _FORMAT_VERSION,
        "kind": model.kind,
        "h_min": model.h_min,
        "customers": {cid: _kde_to_json(k) for cid, k in model.customers.items()},
        "articles": {aid: _counts_to_json(c) for aid, c in model.articles.items()},
        "global": {
            "sizes": _kde_to_json(model.global_sizes),
            "returns": _counts_to_json(model.global_returns),
        },
    }


def from_json(doc: dict) -> BaselineModel:
    if doc.get("kind") != "baseline":
        raise ModelError(f"not a baseline model document (kind={doc.get('kind')!r})")
    customers = {
        cid: CustomerKde(sizes=tuple(entry["sizes"]), bandwidth=entry["h"])
        for cid, entry in doc["customers"].items()
    }
    articles = {
        aid: ArticleReturnCounts(entry["nK"], entry["nS"], entry["nB"])
        for aid, entry in doc["articles"].items()
    }
    g = doc["global"]
    return BaselineModel(
        customers=customers,
        articles=articles,
        global_sizes=CustomerKde(sizes=tuple(g["sizes"]["sizes"]), bandwidth=g["sizes"]["h"]),
        global_returns=ArticleReturnCounts(
            g["returns"]["nK"], g["returns"]["nS"], g["returns"]["nB"]
        ),
        h_min=doc["h_min"],
    )


def save(model: BaselineModel, stream: IO[str]) -> None:
    json.dump(to_json(model), stream, sort_keys=True, indent=1)
    stream.write("\n")


def load(stream: IO[str]) -> BaselineModel:
    return from_json(json.load(stream))
