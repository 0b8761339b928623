"""Discretize continuous size densities onto an article's grid and decide.

Both models produce Gaussian-mixture size densities, so the per-size window
masses are exact normal-CDF differences — no quadrature. The joint table
p(size, outcome) then drives a recommend-or-abstain rule: pick the size most
likely to be kept, abstain when that probability (or, for the hierarchical
model, the parameter confidence) falls below its threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .baseline import BaselineModel, baseline_joint_density
from .domain import Catalog, ReturnStatus, SizeGrid, STATUSES, size_grid
from .errors import DegenerateSupportError, EvalError
from .hbayes import (
    HBayesState,
    param_confidence,
    posterior_return_probs,
    predictive_size_density,
)
from .mixtures import GaussianMixture

LOG_PROB_FLOOR = 1e-12
_DEGENERATE_MASS = 1e-300


@dataclass(frozen=True)
class JointTable:
    """Discretized joint p(size, outcome) over one article's grid.

    probs has one row per grid size and the columns (kept, too_small,
    too_big); entries are non-negative and total 1. param_confidence is
    populated for hierarchical-model tables only.
    """

    grid: SizeGrid
    probs: np.ndarray
    model_kind: str = ""
    customer_id: str = ""
    article_id: str = ""
    param_confidence: float | None = None

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=float)
        if probs.shape != (len(self.grid), 3):
            raise ValueError(f"probs must have shape ({len(self.grid)}, 3)")
        if np.any(probs < 0):
            raise ValueError("joint probabilities must be non-negative")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ValueError("joint table must sum to 1")
        object.__setattr__(self, "probs", probs)

    def kept_column(self) -> np.ndarray:
        return self.probs[:, ReturnStatus.KEPT.index]


@dataclass(frozen=True)
class Recommendation:
    """Decision for one (customer, article) query.

    decision is a grid size, or None for Abstain. joint_prob is p(s*, kept)
    of the best cell — the value compared against tau_joint — and is reported
    even when the decision is to abstain.
    """

    decision: float | None
    joint_prob: float
    tau_joint: float
    tau_param: float
    confidence: float | None = None

    @property
    def abstained(self) -> bool:
        return self.decision is None


def _densities_per_status(
    density: GaussianMixture
    | Sequence[GaussianMixture]
    | Mapping[ReturnStatus, GaussianMixture],
) -> list[GaussianMixture]:
    if isinstance(density, GaussianMixture):
        return [density, density, density]
    if isinstance(density, Mapping):
        return [density[status] for status in STATUSES]
    per_status = list(density)
    if len(per_status) != 3:
        raise ValueError("expected one density per return status (3)")
    return per_status


def discretize(
    density: GaussianMixture
    | Sequence[GaussianMixture]
    | Mapping[ReturnStatus, GaussianMixture],
    return_simplex: np.ndarray | Sequence[float],
    grid: SizeGrid,
    *,
    model_kind: str = "",
    customer_id: str = "",
    article_id: str = "",
    param_confidence: float | None = None,
) -> JointTable:
    """Joint table p(s_i, r) = p(r) * window mass of s_i under the size density.

    Window i is [s_i - step/2, s_i + step/2]; masses are renormalized to the
    grid's total window so each column is a proper conditional. A single
    density is shared across outcomes (independence); a per-status mapping or
    3-sequence supplies outcome-conditional densities. Adjacent windows share
    their edge values, so merging neighboring cells is exact.
    """
    simplex = np.asarray(return_simplex, dtype=float)
    if simplex.shape != (3,) or np.any(simplex < 0) or abs(float(simplex.sum()) - 1.0) > 1e-9:
        raise ValueError("return_simplex must be a 3-component simplex")

    half = grid.step / 2.0
    # one shared edge array: lower edge of the first window, then upper edges
    edges = np.concatenate(([grid.sizes[0] - half], np.asarray(grid.sizes) + half))
    probs = np.empty((len(grid), 3))
    for column, f in enumerate(_densities_per_status(density)):
        cdf_vals = np.asarray(f.cdf(edges))
        total = float(cdf_vals[-1] - cdf_vals[0])
        if total < _DEGENERATE_MASS:
            raise DegenerateSupportError(
                f"size density places no mass on the grid "
                f"[{grid.sizes[0]}, {grid.sizes[-1]}] (window mass {total!r})"
            )
        windows = np.maximum(np.diff(cdf_vals), 0.0)
        probs[:, column] = simplex[column] * (windows / total)
    return JointTable(
        grid=grid,
        probs=probs,
        model_kind=model_kind,
        customer_id=customer_id,
        article_id=article_id,
        param_confidence=param_confidence,
    )


def joint_table(
    model: BaselineModel | HBayesState,
    customer_id: str,
    article_id: str,
    catalog: Catalog,
) -> JointTable:
    """Build the joint table for any id pair (cold starts included).

    The article must exist in the catalog — its grid is the table's support.
    Baseline tables share one size density across outcomes; hierarchical
    tables are outcome-conditional and carry a parameter confidence.
    """
    grid = size_grid(catalog.get(article_id))
    if isinstance(model, BaselineModel):
        mixture, simplex = baseline_joint_density(model, customer_id, article_id)
        return discretize(
            mixture,
            simplex,
            grid,
            model_kind=model.kind,
            customer_id=customer_id,
            article_id=article_id,
        )
    if isinstance(model, HBayesState):
        densities = {
            status: predictive_size_density(model, customer_id, article_id, status, catalog)
            for status in STATUSES
        }
        article = model.article_posterior(article_id)
        if article is None:
            article = model.prior_article_posterior(catalog.get(article_id))
        simplex = posterior_return_probs(article)
        return discretize(
            densities,
            simplex,
            grid,
            model_kind="hbayes",
            customer_id=customer_id,
            article_id=article_id,
            param_confidence=param_confidence(model, customer_id, article_id, catalog),
        )
    raise TypeError(f"unsupported model type {type(model).__name__!r}")


def recommend(table: JointTable, tau_joint: float = 0.0, tau_param: float = 0.0) -> Recommendation:
    """Pick the size with the highest probability of being kept, or abstain.

    Ties break toward the smaller size. Abstains when p(s*, kept) < tau_joint,
    or — for tables carrying a parameter confidence — when that confidence is
    below tau_param.
    """
    kept = table.kept_column()
    best = int(np.argmax(kept))  # first maximum = smaller size on ties
    best_prob = float(kept[best])
    confident = best_prob >= tau_joint
    if table.param_confidence is not None and table.param_confidence < tau_param:
        confident = False
    return Recommendation(
        decision=table.grid.sizes[best] if confident else None,
        joint_prob=best_prob,
        tau_joint=tau_joint,
        tau_param=tau_param,
        confidence=table.param_confidence,
    )


def joint_log_prob(table: JointTable, size: float, status: ReturnStatus) -> float:
    """log p(size, status), floored at log(1e-12) so averages stay finite."""
    idx = table.grid.index_of(size)
    if idx is None:
        raise EvalError(
            f"size {size!r} is not on the article grid "
            f"[{table.grid.sizes[0]}..{table.grid.sizes[-1]}] step {table.grid.step}"
        )
    return math.log(max(float(table.probs[idx, status.index]), LOG_PROB_FLOOR))


def recommendation_to_json(
    rec: Recommendation, customer_id: str, article_id: str
) -> dict:
    """Stable JSON form used by the command-line surface."""
    return {
        "customer_id": customer_id,
        "article_id": article_id,
        "decision": "abstain" if rec.decision is None else rec.decision,
        "p_kept": rec.joint_prob,
        "tau_joint": rec.tau_joint,
        "tau_param": rec.tau_param,
        "confidence": rec.confidence,
    }
