"""Hierarchical Bayesian joint model of purchased size and return outcome.

Each account's size distribution is a truncated stick-breaking mixture of
Gaussians (one component per potential person behind the account). An order's
size is Normal(mu_C,i + mu_A + eta_r, sigma_C^2): account component mean plus
article offset plus an outcome-specific shift (zero for kept purchases).
Return outcomes per article are categorical with a Dirichlet prior whose
concentration blends brand-level and category-level counts through learned
weights w, w'.

Inference is coordinate-ascent mean-field with fully factorized conjugate
families (Normal / Beta / Inverse-Gamma / Dirichlet / Categorical), so every
update is closed-form and the objective is non-decreasing sweep over sweep.
w and w' are point-estimated by MAP grid search (their coupling to the
Dirichlet-multinomial marginal is non-conjugate).
"""

from __future__ import annotations

import hashlib
import json
import math
import weakref
from dataclasses import dataclass, field
from typing import IO, Mapping

import numpy as np
from scipy.special import betaln, digamma, gammaln, ndtr

from .domain import ArticleMeta, Catalog, OrdersDataset, ReturnStatus
from .errors import ConfigError, ModelError
from .mixtures import GaussianMixture

_FORMAT_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)

K, S, B = 0, 1, 2  # status slots: kept, too-small, too-big

DEFAULT_SIZE_PRIORS: dict[tuple[str, str, str], tuple[float, float]] = {
    ("shoes", "m", "EU"): (42.0, 9.0),
    ("shoes", "w", "EU"): (39.0, 9.0),
}
DEFAULT_FALLBACK_PRIOR = (40.0, 16.0)


@dataclass(frozen=True)
class Hyperparams:
    """Fixed model hyperparameters.

    size_prior maps (category, gender, size_system) to the (mean, variance)
    prior of an account component's size; unlisted segments use
    default_size_prior. The remaining fields are global: article offsets are
    Normal(0, 1), outcome shifts Normal(-1, 1) / Normal(+1, 1) for too-small /
    too-big (zero when kept), Beta(1, dp_concentration) stick fractions with
    `truncation` components, Inverse-Gamma(ig_shape, ig_scale) account
    variance, and Beta(a, 1) priors on the count-blending weights.
    """

    size_prior: Mapping[tuple[str, str, str], tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_SIZE_PRIORS)
    )
    default_size_prior: tuple[float, float] = DEFAULT_FALLBACK_PRIOR
    article_offset_prior: tuple[float, float] = (0.0, 1.0)
    eta_small_prior: tuple[float, float] = (-1.0, 1.0)
    eta_big_prior: tuple[float, float] = (1.0, 1.0)
    dp_concentration: float = 0.5
    truncation: int = 4
    ig_shape: float = 1.0
    ig_scale: float = 2.0
    w_prior_shape: float = 0.5
    w_prime_prior_shape: float = 0.1
    alpha_floor: float = 1e-3

    def __post_init__(self) -> None:
        for key, (_, var) in list(self.size_prior.items()) + [((), self.default_size_prior)]:
            if not var > 0:
                raise ConfigError(f"size prior variance must be positive (key {key!r})")
        if not self.article_offset_prior[1] > 0:
            raise ConfigError("article offset prior variance must be positive")
        if not (self.eta_small_prior[1] > 0 and self.eta_big_prior[1] > 0):
            raise ConfigError("shift prior variances must be positive")
        if not self.dp_concentration > 0:
            raise ConfigError("dp_concentration must be positive")
        if self.truncation < 1:
            raise ConfigError("truncation must be at least 1")
        if not (self.ig_shape > 0 and self.ig_scale > 0):
            raise ConfigError("inverse-gamma shape and scale must be positive")
        if not (self.w_prior_shape > 0 and self.w_prime_prior_shape > 0):
            raise ConfigError("weight prior shapes must be positive")
        if not self.alpha_floor > 0:
            raise ConfigError("alpha_floor must be positive")

    def prior_for(self, key: tuple[str, str, str]) -> tuple[float, float]:
        return self.size_prior.get(key, self.default_size_prior)


def stick_breaking_weights(b: np.ndarray | list[float]) -> np.ndarray:
    """Mixture weights pi_i = b_i * prod_{j<i}(1 - b_j) with the last b equal to 1.

    Computed as differences of the remaining-stick products, which keeps every
    weight non-negative and the total at 1 up to rounding.
    """
    arr = np.asarray(b, dtype=float)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("b must be a non-empty 1-d array")
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("stick fractions must lie in [0, 1]")
    if arr[-1] != 1.0:
        raise ValueError("final stick fraction must be exactly 1")
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - arr)))
    return remaining[:-1] - remaining[1:]


def dirichlet_concentration(
    brand_counts: np.ndarray | list[float],
    category_counts: np.ndarray | list[float],
    w: float,
    w_prime: float,
    alpha_floor: float = 1e-3,
) -> np.ndarray:
    """Blend brand- and category-level outcome counts into a Dirichlet concentration.

    The floor keeps the prior proper for brands/categories with no history.
    """
    m = np.asarray(brand_counts, dtype=float)
    mp = np.asarray(category_counts, dtype=float)
    if np.any(m < 0) or np.any(mp < 0):
        raise ValueError("counts must be non-negative")
    if not (0 <= w <= 1 and 0 <= w_prime <= 1):
        raise ValueError("weights must lie in [0, 1]")
    return w * m + w_prime * mp + alpha_floor


@dataclass(frozen=True)
class GlobalParams:
    w: float
    w_prime: float
    eta_small: tuple[float, float]  # Normal (mean, var)
    eta_big: tuple[float, float]


@dataclass(frozen=True)
class CustomerPosterior:
    """Variational factors for one account."""

    component_means: tuple[float, ...]
    component_vars: tuple[float, ...]
    stick_shape1: tuple[float, ...]  # Beta first shapes, components 1..T-1
    stick_shape2: tuple[float, ...]
    sigma_sq_shape: float
    sigma_sq_scale: float
    prior_mean: float
    prior_var: float

    def expected_sticks(self) -> np.ndarray:
        a = np.asarray(self.stick_shape1)
        c = np.asarray(self.stick_shape2)
        return np.concatenate((a / (a + c), [1.0]))

    def mixture_weights(self) -> np.ndarray:
        return stick_breaking_weights(self.expected_sticks())

    def expected_sigma_sq(self) -> float:
        """Posterior mean of the account variance; mode when the mean diverges."""
        if self.sigma_sq_shape > 1.0:
            return self.sigma_sq_scale / (self.sigma_sq_shape - 1.0)
        return self.sigma_sq_scale / (self.sigma_sq_shape + 1.0)


@dataclass(frozen=True)
class ArticlePosterior:
    """Variational offset factor plus the analytic Dirichlet outcome posterior."""

    offset_mean: float
    offset_var: float
    counts: np.ndarray  # observed (kept, small, big)
    alpha: np.ndarray  # prior concentration from blended counts

    @property
    def alpha_hat(self) -> np.ndarray:
        return self.counts + self.alpha


def posterior_return_probs(article: ArticlePosterior) -> np.ndarray:
    """Posterior mean outcome probabilities (n_r + alpha_r) / sum(n + alpha)."""
    ahat = article.alpha_hat
    return ahat / ahat.sum()


@dataclass
class _Design:
    """Order-aligned index arrays for vectorized sweeps."""

    cust_idx: np.ndarray
    art_idx: np.ndarray
    sizes: np.ndarray
    status_idx: np.ndarray
    n_per_customer: np.ndarray


@dataclass
class HBayesState:
    """Array-backed variational state; ids map to rows in sorted order."""

    hyper: Hyperparams
    customer_ids: tuple[str, ...]
    article_ids: tuple[str, ...]
    # per-customer priors resolved from the account's dominant segment
    cust_prior_mean: np.ndarray
    cust_prior_var: np.ndarray
    # variational factors
    comp_mean: np.ndarray  # (nc, T)
    comp_var: np.ndarray
    stick_shape1: np.ndarray  # (nc, T-1)
    stick_shape2: np.ndarray
    ig_shape: np.ndarray  # (nc,)
    ig_scale: np.ndarray
    art_mean: np.ndarray  # (na,)
    art_var: np.ndarray
    eta_mean: np.ndarray  # (3,), kept slot fixed at 0
    eta_var: np.ndarray  # (3,), kept slot fixed at 0
    w: float
    w_prime: float
    # return-outcome data (fixed by the training set)
    art_counts: np.ndarray  # (na, 3)
    alpha_prior: np.ndarray  # (na, 3), tracks current (w, w')
    brand_counts: dict[str, np.ndarray]
    category_counts: dict[str, np.ndarray]
    art_brand: tuple[str, ...]
    art_category: tuple[str, ...]
    # per-order assignment probabilities; recomputed at the top of each sweep
    resp: np.ndarray | None
    elbo_trace: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.customer_index = {cid: i for i, cid in enumerate(self.customer_ids)}
        self.article_index = {aid: i for i, aid in enumerate(self.article_ids)}
        self._design_src: weakref.ref | None = None
        self._design: _Design | None = None

    @property
    def truncation(self) -> int:
        return self.hyper.truncation

    @property
    def kind(self) -> str:
        return "hbayes"

    def global_params(self) -> GlobalParams:
        return GlobalParams(
            w=self.w,
            w_prime=self.w_prime,
            eta_small=(float(self.eta_mean[S]), float(self.eta_var[S])),
            eta_big=(float(self.eta_mean[B]), float(self.eta_var[B])),
        )

    def customer_posterior(self, customer_id: str) -> CustomerPosterior | None:
        ci = self.customer_index.get(customer_id)
        if ci is None:
            return None
        return CustomerPosterior(
            component_means=tuple(self.comp_mean[ci]),
            component_vars=tuple(self.comp_var[ci]),
            stick_shape1=tuple(self.stick_shape1[ci]),
            stick_shape2=tuple(self.stick_shape2[ci]),
            sigma_sq_shape=float(self.ig_shape[ci]),
            sigma_sq_scale=float(self.ig_scale[ci]),
            prior_mean=float(self.cust_prior_mean[ci]),
            prior_var=float(self.cust_prior_var[ci]),
        )

    def article_posterior(self, article_id: str) -> ArticlePosterior | None:
        ai = self.article_index.get(article_id)
        if ai is None:
            return None
        return ArticlePosterior(
            offset_mean=float(self.art_mean[ai]),
            offset_var=float(self.art_var[ai]),
            counts=self.art_counts[ai].copy(),
            alpha=self.alpha_prior[ai].copy(),
        )

    def prior_article_posterior(self, meta: ArticleMeta) -> ArticlePosterior:
        """Cold-start factor for a catalog article unseen in training."""
        zeros = np.zeros(3)
        brand = self.brand_counts.get(meta.brand, zeros)
        category = self.category_counts.get(meta.category, zeros)
        alpha = dirichlet_concentration(
            brand, category, self.w, self.w_prime, self.hyper.alpha_floor
        )
        mean0, var0 = self.hyper.article_offset_prior
        return ArticlePosterior(offset_mean=mean0, offset_var=var0, counts=zeros.copy(), alpha=alpha)

    def design_for(self, dataset: OrdersDataset) -> _Design:
        if self._design is not None and self._design_src is not None:
            if self._design_src() is dataset:
                return self._design
        design = _build_design(self, dataset)
        self._design = design
        self._design_src = weakref.ref(dataset)
        return design


def _build_design(state: HBayesState, dataset: OrdersDataset) -> _Design:
    n = len(dataset)
    cust_idx = np.empty(n, dtype=np.int64)
    art_idx = np.empty(n, dtype=np.int64)
    sizes = np.empty(n, dtype=float)
    status_idx = np.empty(n, dtype=np.int64)
    for k, order in enumerate(dataset.orders):
        ci = state.customer_index.get(order.customer_id)
        ai = state.article_index.get(order.article_id)
        if ci is None or ai is None:
            raise ModelError(
                f"order {order.order_id}: customer or article missing from the fitted state"
            )
        cust_idx[k] = ci
        art_idx[k] = ai
        sizes[k] = order.size
        status_idx[k] = order.status.index
    n_per_customer = np.bincount(cust_idx, minlength=len(state.customer_ids)).astype(float)
    return _Design(cust_idx, art_idx, sizes, status_idx, n_per_customer)


def _stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _modal_prior_key(keys: list[tuple[str, str, str]]) -> tuple[str, str, str]:
    """Most frequent segment key; ties break toward the lexicographically smallest."""
    tally: dict[tuple[str, str, str], int] = {}
    for key in keys:
        tally[key] = tally.get(key, 0) + 1
    return min(tally, key=lambda k: (-tally[k], k))


def init_state(
    dataset: OrdersDataset,
    catalog: Catalog,
    hyper: Hyperparams | None = None,
    seed: int = 0,
) -> HBayesState:
    """Deterministic starting point for coordinate ascent.

    Component means start at the account's empirical mean size plus small
    seeded jitter (sub-seeded per customer id, so initialization does not
    depend on iteration order); all other factors start at their priors.
    """
    hyper = hyper or Hyperparams()
    if len(dataset) == 0:
        raise ModelError("cannot initialize on an empty dataset")
    for order in dataset.orders:
        if order.article_id not in catalog:
            raise ModelError(f"order {order.order_id}: article {order.article_id!r} not in catalog")

    customer_ids = tuple(sorted(dataset.customer_ids()))
    article_ids = tuple(sorted(dataset.article_ids()))
    nc, na, t = len(customer_ids), len(article_ids), hyper.truncation
    cust_pos = {cid: i for i, cid in enumerate(customer_ids)}
    art_pos = {aid: i for i, aid in enumerate(article_ids)}

    sizes_by_customer: dict[str, list[float]] = {cid: [] for cid in customer_ids}
    keys_by_customer: dict[str, list[tuple[str, str, str]]] = {cid: [] for cid in customer_ids}
    art_counts = np.zeros((na, 3), dtype=float)
    for order in dataset.orders:
        sizes_by_customer[order.customer_id].append(order.size)
        keys_by_customer[order.customer_id].append(catalog.get(order.article_id).prior_key)
        art_counts[art_pos[order.article_id], order.status.index] += 1.0

    cust_prior_mean = np.empty(nc)
    cust_prior_var = np.empty(nc)
    comp_mean = np.empty((nc, t))
    for cid in customer_ids:
        ci = cust_pos[cid]
        mu0, var0 = hyper.prior_for(_modal_prior_key(keys_by_customer[cid]))
        cust_prior_mean[ci] = mu0
        cust_prior_var[ci] = var0
        rng = np.random.default_rng([seed, _stable_hash64(cid)])
        emp_mean = float(np.mean(sizes_by_customer[cid]))
        comp_mean[ci] = emp_mean + 0.1 * rng.standard_normal(t)

    art_brand = tuple(catalog.get(aid).brand for aid in article_ids)
    art_category = tuple(catalog.get(aid).category for aid in article_ids)
    brand_counts: dict[str, np.ndarray] = {}
    category_counts: dict[str, np.ndarray] = {}
    for ai in range(na):
        brand_counts.setdefault(art_brand[ai], np.zeros(3))
        brand_counts[art_brand[ai]] += art_counts[ai]
        category_counts.setdefault(art_category[ai], np.zeros(3))
        category_counts[art_category[ai]] += art_counts[ai]

    w, w_prime = 0.5, 0.1  # mid-scale grid starting points, not the prior means
    alpha_prior = _alpha_matrix(
        art_counts.shape[0], art_brand, art_category, brand_counts, category_counts,
        w, w_prime, hyper.alpha_floor,
    )

    state = HBayesState(
        hyper=hyper,
        customer_ids=customer_ids,
        article_ids=article_ids,
        cust_prior_mean=cust_prior_mean,
        cust_prior_var=cust_prior_var,
        comp_mean=comp_mean,
        comp_var=np.ones((nc, t)),
        stick_shape1=np.ones((nc, max(t - 1, 0))),
        stick_shape2=np.full((nc, max(t - 1, 0)), hyper.dp_concentration),
        ig_shape=np.full(nc, hyper.ig_shape),
        ig_scale=np.full(nc, hyper.ig_scale),
        art_mean=np.full(na, hyper.article_offset_prior[0]),
        art_var=np.full(na, hyper.article_offset_prior[1]),
        eta_mean=np.array([0.0, hyper.eta_small_prior[0], hyper.eta_big_prior[0]]),
        eta_var=np.array([0.0, hyper.eta_small_prior[1], hyper.eta_big_prior[1]]),
        w=w,
        w_prime=w_prime,
        art_counts=art_counts,
        alpha_prior=alpha_prior,
        brand_counts=brand_counts,
        category_counts=category_counts,
        art_brand=art_brand,
        art_category=art_category,
        resp=np.full((len(dataset), t), 1.0 / t),
    )
    return state


def _alpha_matrix(na, art_brand, art_category, brand_counts, category_counts, w, w_prime, floor):
    out = np.empty((na, 3))
    for ai in range(na):
        out[ai] = dirichlet_concentration(
            brand_counts[art_brand[ai]], category_counts[art_category[ai]], w, w_prime, floor
        )
    return out


def _expected_log_sticks(state: HBayesState) -> np.ndarray:
    """E[log pi_i] per customer under the Beta stick factors, shape (nc, T)."""
    t = state.truncation
    nc = len(state.customer_ids)
    if t == 1:
        return np.zeros((nc, 1))
    a, c = state.stick_shape1, state.stick_shape2
    dig_total = digamma(a + c)
    e_log_b = digamma(a) - dig_total
    e_log_1mb = digamma(c) - dig_total
    out = np.empty((nc, t))
    tail = np.concatenate((np.zeros((nc, 1)), np.cumsum(e_log_1mb, axis=1)), axis=1)
    out[:, : t - 1] = e_log_b + tail[:, : t - 1]
    out[:, t - 1] = tail[:, t - 1]
    return out


def _expected_precision(state: HBayesState) -> np.ndarray:
    return state.ig_shape / state.ig_scale


def _expected_log_sigma_sq(state: HBayesState) -> np.ndarray:
    return np.log(state.ig_scale) - digamma(state.ig_shape)


def _residual_moments(state, design, comp_mean, comp_var):
    """Expected squared residual per (order, component) and its mean matrix."""
    eta_m = state.eta_mean[design.status_idx]
    eta_v = state.eta_var[design.status_idx]
    shift = state.art_mean[design.art_idx] + eta_m  # (n,)
    mean_matrix = comp_mean[design.cust_idx] + shift[:, None]
    var_extra = (state.art_var[design.art_idx] + eta_v)[:, None]
    resid_sq = (design.sizes[:, None] - mean_matrix) ** 2 + comp_var[design.cust_idx] + var_extra
    return mean_matrix, resid_sq


def _bincount_cols(idx: np.ndarray, weights: np.ndarray, minlength: int) -> np.ndarray:
    """Column-wise bincount; deterministic regardless of worker configuration."""
    cols = [np.bincount(idx, weights=weights[:, j], minlength=minlength)
            for j in range(weights.shape[1])]
    return np.stack(cols, axis=1)


def update_weights(
    art_counts: np.ndarray,
    brand_matrix: np.ndarray,
    category_matrix: np.ndarray,
    hyper: Hyperparams,
    grid_size: int = 50,
    grid_floor: float = 1e-4,
) -> tuple[float, float]:
    """MAP point estimate of the count-blending weights on a log-spaced grid.

    Maximizes the summed Dirichlet-multinomial marginal likelihood of each
    article's outcome counts plus the Beta(a, 1) log-priors. The counts are
    fixed by the data, so this converges after a single call.
    """
    grid = np.logspace(math.log10(grid_floor), 0.0, grid_size)
    n_tot = art_counts.sum(axis=1)
    best = (-np.inf, 0, 0)
    for i, w in enumerate(grid):
        # (grid_size, na, 3) block per outer w value keeps memory bounded
        alpha = (
            w * brand_matrix[None, :, :]
            + grid[:, None, None] * category_matrix[None, :, :]
            + hyper.alpha_floor
        )
        a_tot = alpha.sum(axis=2)
        ll = (
            gammaln(a_tot)
            - gammaln(a_tot + n_tot[None, :])
            + (gammaln(alpha + art_counts[None, :, :]) - gammaln(alpha)).sum(axis=2)
        ).sum(axis=1)
        obj = (
            ll
            + _beta_logpdf(w, hyper.w_prior_shape)
            + _beta_logpdf(grid, hyper.w_prime_prior_shape)
        )
        j = int(np.argmax(obj))
        if obj[j] > best[0]:
            best = (float(obj[j]), i, j)
    return float(grid[best[1]]), float(grid[best[2]])


def _beta_logpdf(x, a: float, b: float = 1.0):
    x = np.asarray(x, dtype=float)
    out = (a - 1.0) * np.log(x) - betaln(a, b)
    if b != 1.0:
        out = out + (b - 1.0) * np.log1p(-x)
    return out if out.ndim else float(out)


def _refresh_alpha(state: HBayesState) -> None:
    state.alpha_prior = _alpha_matrix(
        state.art_counts.shape[0],
        state.art_brand,
        state.art_category,
        state.brand_counts,
        state.category_counts,
        state.w,
        state.w_prime,
        state.hyper.alpha_floor,
    )


def cavi_sweep(state: HBayesState, dataset: OrdersDataset) -> tuple[HBayesState, float]:
    """One full coordinate-ascent pass in fixed order; appends the new objective.

    Order: assignments, sticks, component means, account variances, article
    offsets, outcome shifts, concentration refresh, weight re-estimation. Each
    update is the exact conditional optimum, so the objective cannot decrease.
    """
    hyper = state.hyper
    design = state.design_for(dataset)
    nc = len(state.customer_ids)
    na = len(state.article_ids)
    t = state.truncation
    c_idx, a_idx = design.cust_idx, design.art_idx
    sizes, r_idx = design.sizes, design.status_idx
    eta_m = state.eta_mean[r_idx]
    eta_v = state.eta_var[r_idx]

    # (1) assignment probabilities given all Gaussian factors
    e_tau = _expected_precision(state)
    mean_matrix, resid_sq = _residual_moments(state, design, state.comp_mean, state.comp_var)
    recomposed = state.comp_mean[c_idx] + (state.art_mean[a_idx][:, None] + eta_m[:, None])
    assert np.allclose(mean_matrix, recomposed, rtol=0, atol=1e-10), \
        "likelihood mean must be component mean + article offset + outcome shift"
    log_rho = _expected_log_sticks(state)[c_idx] - 0.5 * e_tau[c_idx, None] * resid_sq
    log_rho -= log_rho.max(axis=1, keepdims=True)
    rho = np.exp(log_rho)
    rho /= rho.sum(axis=1, keepdims=True)
    state.resp = rho

    # (2) stick fractions from expected component usage
    occupancy = _bincount_cols(c_idx, rho, nc)  # (nc, t)
    if t > 1:
        tail = np.flip(np.cumsum(np.flip(occupancy, axis=1), axis=1), axis=1)
        state.stick_shape1 = 1.0 + occupancy[:, : t - 1]
        state.stick_shape2 = hyper.dp_concentration + tail[:, 1:]

    # (3) component mean factors
    target = sizes - state.art_mean[a_idx] - eta_m
    weighted_target = _bincount_cols(c_idx, rho * target[:, None], nc)
    prec = 1.0 / state.cust_prior_var[:, None] + e_tau[:, None] * occupancy
    num = (state.cust_prior_mean / state.cust_prior_var)[:, None] + e_tau[:, None] * weighted_target
    state.comp_var = 1.0 / prec
    state.comp_mean = num / prec

    # (4) account variance factors from expected squared residuals
    _, resid_sq = _residual_moments(state, design, state.comp_mean, state.comp_var)
    ss = np.bincount(c_idx, weights=(rho * resid_sq).sum(axis=1), minlength=nc)
    state.ig_shape = hyper.ig_shape + 0.5 * design.n_per_customer
    state.ig_scale = hyper.ig_scale + 0.5 * ss

    # (5) article offset factors pooling each article's orders
    e_tau = _expected_precision(state)
    comp_bar = (rho * state.comp_mean[c_idx]).sum(axis=1)
    art_target = sizes - comp_bar - eta_m
    prec_a = 1.0 / hyper.article_offset_prior[1] + np.bincount(
        a_idx, weights=e_tau[c_idx], minlength=na
    )
    num_a = hyper.article_offset_prior[0] / hyper.article_offset_prior[1] + np.bincount(
        a_idx, weights=e_tau[c_idx] * art_target, minlength=na
    )
    state.art_var = 1.0 / prec_a
    state.art_mean = num_a / prec_a

    # (6) outcome shift factors pooling all too-small / too-big orders
    shift_target = sizes - comp_bar - state.art_mean[a_idx]
    for slot, (prior_mean, prior_var) in ((S, hyper.eta_small_prior), (B, hyper.eta_big_prior)):
        mask = r_idx == slot
        prec = 1.0 / prior_var + float(np.sum(e_tau[c_idx[mask]]))
        num = prior_mean / prior_var + float(np.sum(e_tau[c_idx[mask]] * shift_target[mask]))
        state.eta_var[slot] = 1.0 / prec
        state.eta_mean[slot] = num / prec

    # (7) concentration refresh under the current weights
    _refresh_alpha(state)

    # (8) weight re-estimation, then re-sync the concentrations so the
    # Dirichlet factors stay the exact conjugate posteriors
    brand_matrix = np.stack([state.brand_counts[b] for b in state.art_brand])
    category_matrix = np.stack([state.category_counts[c] for c in state.art_category])
    state.w, state.w_prime = update_weights(
        state.art_counts, brand_matrix, category_matrix, hyper
    )
    _refresh_alpha(state)

    value = elbo(state, dataset)
    state.elbo_trace.append(value)
    return state, value


def elbo(state: HBayesState, dataset: OrdersDataset) -> float:
    """Evidence lower bound for the current factors; raises on non-finite terms.

    Cross-entity accumulations use exact compensated summation so the value is
    independent of id labeling and iteration order.
    """
    hyper = state.hyper
    design = state.design_for(dataset)
    nc = len(state.customer_ids)
    terms: dict[str, float] = {}

    if state.resp is None or state.resp.shape[0] != len(design.sizes):
        # assignments are re-derivable; rebuild them at their conditional optimum
        e_tau = _expected_precision(state)
        _, resid_sq = _residual_moments(state, design, state.comp_mean, state.comp_var)
        log_rho = _expected_log_sticks(state)[design.cust_idx] - 0.5 * (
            e_tau[design.cust_idx, None] * resid_sq
        )
        log_rho -= log_rho.max(axis=1, keepdims=True)
        rho = np.exp(log_rho)
        rho /= rho.sum(axis=1, keepdims=True)
        state.resp = rho
    rho = state.resp

    e_tau = _expected_precision(state)
    e_log_sig = _expected_log_sigma_sq(state)
    _, resid_sq = _residual_moments(state, design, state.comp_mean, state.comp_var)
    loglik = rho * (
        -0.5 * (_LOG_2PI + e_log_sig[design.cust_idx, None])
        - 0.5 * e_tau[design.cust_idx, None] * resid_sq
    )
    terms["size_likelihood"] = float(np.sum(loglik))
    terms["assignment_prior"] = float(
        np.sum(rho * _expected_log_sticks(state)[design.cust_idx])
    )
    terms["assignment_entropy"] = float(-np.sum(np.where(rho > 0, rho * np.log(rho), 0.0)))

    ahat = state.art_counts + state.alpha_prior
    e_log_theta = digamma(ahat) - digamma(ahat.sum(axis=1, keepdims=True))
    terms["return_likelihood"] = float(
        np.sum(e_log_theta[design.art_idx, design.status_idx])
    )
    terms["return_kl"] = -math.fsum(_kl_dirichlet(ahat, state.alpha_prior).tolist())

    kl_comp = _kl_normal(
        state.comp_mean,
        state.comp_var,
        state.cust_prior_mean[:, None],
        state.cust_prior_var[:, None],
    ).sum(axis=1)
    terms["component_kl"] = -math.fsum(kl_comp.tolist())

    if state.truncation > 1:
        kl_sticks = _kl_beta(
            state.stick_shape1, state.stick_shape2, 1.0, hyper.dp_concentration
        ).sum(axis=1)
        terms["stick_kl"] = -math.fsum(kl_sticks.tolist())
    else:
        terms["stick_kl"] = 0.0

    kl_sigma = _kl_invgamma(state.ig_shape, state.ig_scale, hyper.ig_shape, hyper.ig_scale)
    terms["variance_kl"] = -math.fsum(np.atleast_1d(kl_sigma).tolist())

    kl_art = _kl_normal(
        state.art_mean, state.art_var, hyper.article_offset_prior[0], hyper.article_offset_prior[1]
    )
    terms["offset_kl"] = -math.fsum(np.atleast_1d(kl_art).tolist())

    terms["shift_kl"] = -(
        _kl_normal_scalar(state.eta_mean[S], state.eta_var[S], *hyper.eta_small_prior)
        + _kl_normal_scalar(state.eta_mean[B], state.eta_var[B], *hyper.eta_big_prior)
    )
    terms["weight_prior"] = _beta_logpdf(state.w, hyper.w_prior_shape) + _beta_logpdf(
        state.w_prime, hyper.w_prime_prior_shape
    )

    for name, value in terms.items():
        if not math.isfinite(value):
            raise ModelError(f"objective is non-finite: offending factor {name!r}")
    return math.fsum(terms.values())


def _kl_normal(m, v, m0, v0):
    return 0.5 * (v / v0 + (m - m0) ** 2 / v0 - 1.0 + np.log(v0 / v))


def _kl_normal_scalar(m, v, m0, v0) -> float:
    return float(_kl_normal(float(m), float(v), m0, v0))


def _kl_beta(a, c, a0, c0):
    return (
        betaln(a0, c0)
        - betaln(a, c)
        + (a - a0) * digamma(a)
        + (c - c0) * digamma(c)
        + (a0 - a + c0 - c) * digamma(a + c)
    )


def _kl_invgamma(a, b, a0, b0):
    return a0 * np.log(b / b0) + gammaln(a0) - gammaln(a) + (a - a0) * digamma(a) + a * (b0 - b) / b


def _kl_dirichlet(alpha, beta):
    a_tot = alpha.sum(axis=-1)
    b_tot = beta.sum(axis=-1)
    return (
        gammaln(a_tot)
        - gammaln(alpha).sum(axis=-1)
        - gammaln(b_tot)
        + gammaln(beta).sum(axis=-1)
        + ((alpha - beta) * (digamma(alpha) - digamma(a_tot)[..., None])).sum(axis=-1)
    )


def fit_hbayes(
    dataset: OrdersDataset,
    catalog: Catalog,
    hyper: Hyperparams | None = None,
    tol: float = 1e-4,
    max_sweeps: int = 200,
    seed: int = 0,
    on_sweep=None,
) -> HBayesState:
    """Run coordinate ascent to convergence (relative objective change < tol).

    Reproducible bit-exactly for a fixed seed and dataset. `on_sweep(i, value)`
    is called after each sweep with the 1-based sweep number and objective.
    """
    state = init_state(dataset, catalog, hyper, seed)
    previous = elbo(state, dataset)
    for sweep in range(1, max_sweeps + 1):
        state, value = cavi_sweep(state, dataset)
        if on_sweep:
            on_sweep(sweep, value)
        if abs(value - previous) < tol * max(abs(value), 1e-12):
            break
        previous = value
    return state


def predictive_size_density(
    state: HBayesState,
    customer_id: str,
    article_id: str,
    status: ReturnStatus,
    catalog: Catalog,
) -> GaussianMixture:
    """Plug-in size density conditional on the return outcome.

    Component means are E[mu_C,i] + E[mu_A] + E[eta_r]; each component's
    variance adds the expected account variance and the posterior variances of
    all three means. Unknown accounts collapse to a single component at the
    segment prior of the queried article; unknown articles use the zero-offset
    prior. The article must exist in the catalog (its segment and grid drive
    the prior lookup).
    """
    meta = catalog.get(article_id)
    art = state.article_posterior(article_id)
    if art is None:
        art = state.prior_article_posterior(meta)
    slot = status.index
    eta_mean = float(state.eta_mean[slot])
    eta_var = float(state.eta_var[slot])

    cust = state.customer_posterior(customer_id)
    if cust is None:
        mu0, var0 = state.hyper.prior_for(meta.prior_key)
        sigma_sq = _prior_sigma_sq(state.hyper)
        means = np.array([mu0 + art.offset_mean + eta_mean])
        variances = np.array([var0 + sigma_sq + art.offset_var + eta_var])
        weights = np.array([1.0])
    else:
        weights = cust.mixture_weights()
        means = np.asarray(cust.component_means) + art.offset_mean + eta_mean
        variances = (
            np.asarray(cust.component_vars)
            + cust.expected_sigma_sq()
            + art.offset_var
            + eta_var
        )
    return GaussianMixture(means=means, sigmas=np.sqrt(variances), weights=weights)


def _prior_sigma_sq(hyper: Hyperparams) -> float:
    """Account-variance contribution before any data: prior mean, or mode if the
    mean diverges (shape <= 1)."""
    if hyper.ig_shape > 1.0:
        return hyper.ig_scale / (hyper.ig_shape - 1.0)
    return hyper.ig_scale / (hyper.ig_shape + 1.0)


def param_confidence(
    state: HBayesState, customer_id: str, article_id: str, catalog: Catalog
) -> float:
    """Posterior mass of the dominant size parameter within half a grid step.

    Measures how tightly the account-plus-article size parameter is pinned
    down: the probability that mu_C,i* + mu_A lies within +-step/2 of its
    posterior mean, with i* the heaviest mixture component. Unknown accounts
    or articles score 0.
    """
    cust = state.customer_posterior(customer_id)
    art = state.article_posterior(article_id)
    if cust is None or art is None:
        return 0.0
    meta = catalog.get(article_id)
    weights = cust.mixture_weights()
    i_star = int(np.argmax(weights))
    var_star = float(cust.component_vars[i_star]) + art.offset_var
    half_window = meta.step / 2.0
    if var_star <= 0.0:
        return 1.0
    return float(2.0 * ndtr(half_window / math.sqrt(var_star)) - 1.0)


def to_json(state: HBayesState) -> dict:
    hyper = state.hyper
    customers = {}
    for cid in state.customer_ids:
        c = state.customer_posterior(cid)
        customers[cid] = {
            "components": [
                {"mean": m, "var": v} for m, v in zip(c.component_means, c.component_vars)
            ],
            "sticks": [
                {"shape1": a, "shape2": b} for a, b in zip(c.stick_shape1, c.stick_shape2)
            ],
            "sigma_sq": {"shape": c.sigma_sq_shape, "scale": c.sigma_sq_scale},
            "size_prior": {"mean": c.prior_mean, "var": c.prior_var},
        }
    articles = {}
    for aid in state.article_ids:
        a = state.article_posterior(aid)
        articles[aid] = {
            "offset": {"mean": a.offset_mean, "var": a.offset_var},
            "counts": a.counts.tolist(),
            "alpha": a.alpha.tolist(),
            "brand": state.art_brand[state.article_index[aid]],
            "category": state.art_category[state.article_index[aid]],
        }
    return {
        "version": _FORMAT_VERSION,
        "kind": "hbayes",
        "hyper": {
            "size_prior": [
                [list(key), list(value)] for key, value in sorted(hyper.size_prior.items())
            ],
            "default_size_prior": list(hyper.default_size_prior),
            "article_offset_prior": list(hyper.article_offset_prior),
            "eta_small_prior": list(hyper.eta_small_prior),
            "eta_big_prior": list(hyper.eta_big_prior),
            "dp_concentration": hyper.dp_concentration,
            "truncation": hyper.truncation,
            "ig_shape": hyper.ig_shape,
            "ig_scale": hyper.ig_scale,
            "w_prior_shape": hyper.w_prior_shape,
            "w_prime_prior_shape": hyper.w_prime_prior_shape,
            "alpha_floor": hyper.alpha_floor,
        },
        "global": {
            "w": state.w,
            "w_prime": state.w_prime,
            "eta_small": {"mean": float(state.eta_mean[S]), "var": float(state.eta_var[S])},
            "eta_big": {"mean": float(state.eta_mean[B]), "var": float(state.eta_var[B])},
        },
        "customers": customers,
        "articles": articles,
        "brand_counts": {k: v.tolist() for k, v in sorted(state.brand_counts.items())},
        "category_counts": {k: v.tolist() for k, v in sorted(state.category_counts.items())},
        "elbo_trace": list(state.elbo_trace),
    }


def from_json(doc: dict) -> HBayesState:
    if doc.get("kind") != "hbayes":
        raise ModelError(f"not a hierarchical model document (kind={doc.get('kind')!r})")
    hj = doc["hyper"]
    hyper = Hyperparams(
        size_prior={tuple(key): tuple(value) for key, value in hj["size_prior"]},
        default_size_prior=tuple(hj["default_size_prior"]),
        article_offset_prior=tuple(hj["article_offset_prior"]),
        eta_small_prior=tuple(hj["eta_small_prior"]),
        eta_big_prior=tuple(hj["eta_big_prior"]),
        dp_concentration=hj["dp_concentration"],
        truncation=hj["truncation"],
        ig_shape=hj["ig_shape"],
        ig_scale=hj["ig_scale"],
        w_prior_shape=hj["w_prior_shape"],
        w_prime_prior_shape=hj["w_prime_prior_shape"],
        alpha_floor=hj["alpha_floor"],
    )
    t = hyper.truncation
    customer_ids = tuple(sorted(doc["customers"]))
    article_ids = tuple(sorted(doc["articles"]))
    nc, na = len(customer_ids), len(article_ids)

    cust_prior_mean = np.empty(nc)
    cust_prior_var = np.empty(nc)
    comp_mean = np.empty((nc, t))
    comp_var = np.empty((nc, t))
    stick_shape1 = np.ones((nc, max(t - 1, 0)))
    stick_shape2 = np.ones((nc, max(t - 1, 0)))
    ig_shape = np.empty(nc)
    ig_scale = np.empty(nc)
    for i, cid in enumerate(customer_ids):
        entry = doc["customers"][cid]
        comp_mean[i] = [c["mean"] for c in entry["components"]]
        comp_var[i] = [c["var"] for c in entry["components"]]
        if t > 1:
            stick_shape1[i] = [s["shape1"] for s in entry["sticks"]]
            stick_shape2[i] = [s["shape2"] for s in entry["sticks"]]
        ig_shape[i] = entry["sigma_sq"]["shape"]
        ig_scale[i] = entry["sigma_sq"]["scale"]
        cust_prior_mean[i] = entry["size_prior"]["mean"]
        cust_prior_var[i] = entry["size_prior"]["var"]

    art_mean = np.empty(na)
    art_var = np.empty(na)
    art_counts = np.empty((na, 3))
    alpha_prior = np.empty((na, 3))
    art_brand = []
    art_category = []
    for i, aid in enumerate(article_ids):
        entry = doc["articles"][aid]
        art_mean[i] = entry["offset"]["mean"]
        art_var[i] = entry["offset"]["var"]
        art_counts[i] = entry["counts"]
        alpha_prior[i] = entry["alpha"]
        art_brand.append(entry["brand"])
        art_category.append(entry["category"])

    g = doc["global"]
    return HBayesState(
        hyper=hyper,
        customer_ids=customer_ids,
        article_ids=article_ids,
        cust_prior_mean=cust_prior_mean,
        cust_prior_var=cust_prior_var,
        comp_mean=comp_mean,
        comp_var=comp_var,
        stick_shape1=stick_shape1,
        stick_shape2=stick_shape2,
        ig_shape=ig_shape,
        ig_scale=ig_scale,
        art_mean=art_mean,
        art_var=art_var,
        eta_mean=np.array([0.0, g["eta_small"]["mean"], g["eta_big"]["mean"]]),
        eta_var=np.array([0.0, g["eta_small"]["var"], g["eta_big"]["var"]]),
        w=g["w"],
        w_prime=g["w_prime"],
        art_counts=art_counts,
        alpha_prior=alpha_prior,
        brand_counts={k: np.asarray(v, dtype=float) for k, v in doc["brand_counts"].items()},
        category_counts={k: np.asarray(v, dtype=float) for k, v in doc["category_counts"].items()},
        art_brand=tuple(art_brand),
        art_category=tuple(art_category),
        resp=None,
        elbo_trace=list(doc["elbo_trace"]),
    )


def save(state: HBayesState, stream: IO[str]) -> None:
    json.dump(to_json(state), stream, sort_keys=True, indent=1)
    stream.write("\n")


def load(stream: IO[str]) -> HBayesState:
    return from_json(json.load(stream))
