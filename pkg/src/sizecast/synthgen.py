"""Forward sampler of the generative model, with known ground truth.

Samples every latent variable from its prior (account component means and
stick weights, account variance, article offsets, outcome simplexes from the
count-blended Dirichlet, global shift parameters), then draws orders:
component ~ stick weights, outcome ~ article simplex, continuous size ~
Normal(component mean + article offset + outcome shift, account variance),
snapped to the article's grid. Each entity draws from its own sub-seeded
generator, so output is reproducible regardless of scheduling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import IO

import numpy as np

from .domain import (
    ArticleMeta,
    Catalog,
    IngestStats,
    Order,
    OrdersDataset,
    ReturnStatus,
    STATUSES,
    size_grid,
)
from .errors import ConfigError, EvalError
from .hbayes import HBayesState, Hyperparams, dirichlet_concentration, stick_breaking_weights

_FORMAT_VERSION = 1

# rng namespaces: one child generator per (seed, namespace, entity index)
_NS_TEMPLATE = 0
_NS_GLOBAL = 1
_NS_CUSTOMER = 2
_NS_ARTICLE = 3
_NS_ORDERS = 4

DEFAULT_WINDOW_START = datetime(2021, 1, 1, tzinfo=timezone.utc)
DEFAULT_WINDOW_DAYS = 365

# size ladders per gender, wide enough that most sampled sizes land on-grid
_GRIDS = {
    "m": tuple(float(s) for s in range(38, 49)),
    "w": tuple(float(s) for s in range(34, 45)),
}
_GENDERS = ("m", "w")
_CATEGORY = "shoes"
_SIZE_SYSTEM = "EU"

# scale of the synthetic brand/category outcome-count profiles that feed the
# Dirichlet concentration (brands are niche, categories broad)
_BRAND_COUNT_SCALE = 300.0
_CATEGORY_COUNT_SCALE = 2000.0
_COUNT_PROFILE = (6.0, 1.5, 1.5)  # mostly-kept outcome mix


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the sampler; defaults give the desk-scale dataset."""

    n_customers: int = 200
    n_articles: int = 50
    n_orders: int = 20_000
    n_brands: int = 8
    seed: int = 1
    hyper: Hyperparams = field(default_factory=Hyperparams)
    window_start: datetime = DEFAULT_WINDOW_START
    window_days: int = DEFAULT_WINDOW_DAYS

    def __post_init__(self) -> None:
        if self.n_customers < 1 or self.n_articles < 1 or self.n_orders < 1:
            raise ConfigError("customer, article, and order counts must be positive")
        if self.n_brands < 1:
            raise ConfigError("need at least one brand")
        if self.window_days < 1:
            raise ConfigError("timestamp window must span at least one day")
        if self.window_start.tzinfo is None:
            raise ConfigError("window_start must be timezone-aware")


@dataclass(frozen=True)
class GroundTruth:
    """The sampled latent variables, aligned with customer_ids/article_ids."""

    customer_ids: tuple[str, ...]
    article_ids: tuple[str, ...]
    component_means: np.ndarray  # (n_customers, T)
    component_weights: np.ndarray  # (n_customers, T)
    sigma_sq: np.ndarray  # (n_customers,)
    offsets: np.ndarray  # (n_articles,)
    return_probs: np.ndarray  # (n_articles, 3)
    eta_small: float
    eta_big: float
    w: float
    w_prime: float


@dataclass(frozen=True)
class RecoveryScore:
    """How well a fitted state recovers the sampled article/global parameters."""

    offset_correlation: float
    offset_sign_accuracy: float
    eta_small_abs_error: float
    eta_big_abs_error: float
    n_articles: int


def _build_catalog(config: SynthConfig) -> Catalog:
    articles = {}
    for ai in range(config.n_articles):
        gender = _GENDERS[ai % 2]
        article_id = f"a{ai:03d}"
        articles[article_id] = ArticleMeta(
            article_id=article_id,
            brand=f"b{ai % config.n_brands:02d}",
            category=_CATEGORY,
            gender=gender,
            size_system=_SIZE_SYSTEM,
            sizes=_GRIDS[gender],
            step=1.0,
        )
    return Catalog(articles=articles)


def _sample_truth(config: SynthConfig, catalog: Catalog) -> GroundTruth:
    hyper = config.hyper
    t = hyper.truncation
    customer_ids = tuple(f"c{ci:04d}" for ci in range(config.n_customers))
    article_ids = tuple(sorted(catalog.ids()))

    # synthetic brand/category outcome-count profiles (the "history" the
    # Dirichlet concentration blends); template-level, not per-order counts
    rng_t = np.random.default_rng([config.seed, _NS_TEMPLATE])
    brands = sorted({catalog.get(aid).brand for aid in article_ids})
    brand_counts = {
        b: _BRAND_COUNT_SCALE * rng_t.dirichlet(_COUNT_PROFILE) for b in brands
    }
    category_counts = {_CATEGORY: _CATEGORY_COUNT_SCALE * rng_t.dirichlet(_COUNT_PROFILE)}

    rng_g = np.random.default_rng([config.seed, _NS_GLOBAL])
    eta_small = float(rng_g.normal(hyper.eta_small_prior[0], np.sqrt(hyper.eta_small_prior[1])))
    eta_big = float(rng_g.normal(hyper.eta_big_prior[0], np.sqrt(hyper.eta_big_prior[1])))
    w = float(rng_g.beta(hyper.w_prior_shape, 1.0))
    w_prime = float(rng_g.beta(hyper.w_prime_prior_shape, 1.0))

    component_means = np.empty((config.n_customers, t))
    component_weights = np.empty((config.n_customers, t))
    sigma_sq = np.empty(config.n_customers)
    for ci in range(config.n_customers):
        rng_c = np.random.default_rng([config.seed, _NS_CUSTOMER, ci])
        gender = _GENDERS[ci % 2]
        mu0, var0 = hyper.prior_for((_CATEGORY, gender, _SIZE_SYSTEM))
        sticks = np.append(rng_c.beta(1.0, hyper.dp_concentration, size=t - 1), 1.0)
        component_weights[ci] = stick_breaking_weights(sticks)
        component_means[ci] = rng_c.normal(mu0, np.sqrt(var0), size=t)
        # 1/Gamma(shape, rate) is Inverse-Gamma(shape, scale)
        sigma_sq[ci] = 1.0 / rng_c.gamma(hyper.ig_shape, 1.0 / hyper.ig_scale)

    offsets = np.empty(config.n_articles)
    return_probs = np.empty((config.n_articles, 3))
    for ai, article_id in enumerate(article_ids):
        rng_a = np.random.default_rng([config.seed, _NS_ARTICLE, ai])
        meta = catalog.get(article_id)
        offsets[ai] = rng_a.normal(
            hyper.article_offset_prior[0], np.sqrt(hyper.article_offset_prior[1])
        )
        alpha = dirichlet_concentration(
            brand_counts[meta.brand],
            category_counts[meta.category],
            w,
            w_prime,
            hyper.alpha_floor,
        )
        return_probs[ai] = rng_a.dirichlet(alpha)

    return GroundTruth(
        customer_ids=customer_ids,
        article_ids=article_ids,
        component_means=component_means,
        component_weights=component_weights,
        sigma_sq=sigma_sq,
        offsets=offsets,
        return_probs=return_probs,
        eta_small=eta_small,
        eta_big=eta_big,
        w=w,
        w_prime=w_prime,
    )


def _pick(rng: np.random.Generator, probs: np.ndarray) -> int:
    """Categorical draw via one uniform and the cumulative weights."""
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(0, probs.size - 1))


def sample_dataset(
    config: SynthConfig, truth: GroundTruth | None = None
) -> tuple[OrdersDataset, Catalog, GroundTruth]:
    """Sample (orders, catalog, truth); pass `truth` to fix the latents.

    Orders are allocated evenly across customers (earlier customers take the
    remainder), and each customer shops only their own gender's articles.
    """
    catalog = _build_catalog(config)
    if truth is None:
        truth = _sample_truth(config, catalog)

    eta = np.array([0.0, truth.eta_small, truth.eta_big])
    article_ids = truth.article_ids
    grids = {aid: size_grid(catalog.get(aid)) for aid in article_ids}
    by_gender = {
        g: [i for i, aid in enumerate(article_ids) if catalog.get(aid).gender == g]
        for g in _GENDERS
    }
    for g, pool in by_gender.items():
        if not pool:
            raise ConfigError(f"catalog template has no articles for gender {g!r}")

    window_us = config.window_days * 86_400 * 1_000_000
    base, extra = divmod(config.n_orders, config.n_customers)
    orders: list[Order] = []
    serial = 0
    for ci, customer_id in enumerate(truth.customer_ids):
        rng = np.random.default_rng([config.seed, _NS_ORDERS, ci])
        pool = by_gender[_GENDERS[ci % 2]]
        sd = float(np.sqrt(truth.sigma_sq[ci]))
        for _ in range(base + (1 if ci < extra else 0)):
            ai = pool[int(rng.integers(len(pool)))]
            component = _pick(rng, truth.component_weights[ci])
            status_idx = _pick(rng, truth.return_probs[ai])
            mean = truth.component_means[ci, component] + truth.offsets[ai] + eta[status_idx]
            size = grids[article_ids[ai]].snap(float(rng.normal(mean, sd)))
            timestamp = config.window_start + timedelta(
                microseconds=int(rng.random() * window_us)
            )
            orders.append(
                Order(
                    order_id=f"o{serial:06d}",
                    customer_id=customer_id,
                    article_id=article_ids[ai],
                    size=size,
                    status=STATUSES[status_idx],
                    timestamp=timestamp,
                )
            )
            serial += 1

    dataset = OrdersDataset(orders=tuple(orders), ingest_stats=IngestStats(accepted=len(orders)))
    return dataset, catalog, truth


def recovery_score(truth: GroundTruth, fitted: HBayesState) -> RecoveryScore:
    """Correlation/sign agreement of article offsets and absolute errors of the
    global shifts, over articles present in both truth and the fitted state."""
    common = [aid for aid in truth.article_ids if aid in fitted.article_index]
    if len(common) < 10:
        raise EvalError(
            f"recovery needs at least 10 common articles, got {len(common)}"
        )
    truth_pos = {aid: i for i, aid in enumerate(truth.article_ids)}
    true_offsets = np.array([truth.offsets[truth_pos[aid]] for aid in common])
    est_offsets = np.array([fitted.art_mean[fitted.article_index[aid]] for aid in common])
    if float(true_offsets.std()) == 0.0 or float(est_offsets.std()) == 0.0:
        raise EvalError("offset correlation undefined: zero variance")
    corr = float(np.corrcoef(true_offsets, est_offsets)[0, 1])
    sign_acc = float(np.mean((true_offsets > 0) == (est_offsets > 0)))
    eta_small_est = float(fitted.eta_mean[ReturnStatus.TOO_SMALL.index])
    eta_big_est = float(fitted.eta_mean[ReturnStatus.TOO_BIG.index])
    return RecoveryScore(
        offset_correlation=corr,
        offset_sign_accuracy=sign_acc,
        eta_small_abs_error=abs(eta_small_est - truth.eta_small),
        eta_big_abs_error=abs(eta_big_est - truth.eta_big),
        n_articles=len(common),
    )


def truth_to_json(truth: GroundTruth) -> dict:
    return {
        "version": _FORMAT_VERSION,
        "global": {
            "eta_small": truth.eta_small,
            "eta_big": truth.eta_big,
            "w": truth.w,
            "w_prime": truth.w_prime,
        },
        "customers": {
            cid: {
                "means": truth.component_means[ci].tolist(),
                "weights": truth.component_weights[ci].tolist(),
                "sigma_sq": float(truth.sigma_sq[ci]),
            }
            for ci, cid in enumerate(truth.customer_ids)
        },
        "articles": {
            aid: {
                "offset": float(truth.offsets[ai]),
                "return_probs": truth.return_probs[ai].tolist(),
            }
            for ai, aid in enumerate(truth.article_ids)
        },
    }


def truth_from_json(doc: dict) -> GroundTruth:
    customer_ids = tuple(sorted(doc["customers"]))
    article_ids = tuple(sorted(doc["articles"]))
    g = doc["global"]
    return GroundTruth(
        customer_ids=customer_ids,
        article_ids=article_ids,
        component_means=np.array([doc["customers"][c]["means"] for c in customer_ids]),
        component_weights=np.array([doc["customers"][c]["weights"] for c in customer_ids]),
        sigma_sq=np.array([doc["customers"][c]["sigma_sq"] for c in customer_ids]),
        offsets=np.array([doc["articles"][a]["offset"] for a in article_ids]),
        return_probs=np.array([doc["articles"][a]["return_probs"] for a in article_ids]),
        eta_small=g["eta_small"],
        eta_big=g["eta_big"],
        w=g["w"],
        w_prime=g["w_prime"],
    )


def save_truth(truth: GroundTruth, stream: IO[str]) -> None:
    json.dump(truth_to_json(truth), stream, sort_keys=True, indent=1)
    stream.write("\n")


def load_truth(stream: IO[str]) -> GroundTruth:
    return truth_from_json(json.load(stream))
