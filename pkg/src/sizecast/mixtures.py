"""Gaussian mixture densities over the continuous size axis.

Both size models produce densities of this form (a KDE is an equal-weight
mixture), so discretization onto a size grid can use exact normal-CDF
differences instead of quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

_SQRT_TWO_PI = float(np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianMixture:
    """Fixed mixture sum_m w_m * Normal(mean_m, sigma_m^2); weights sum to 1."""

    means: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=float)
        sigmas = np.asarray(self.sigmas, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if not (means.shape == sigmas.shape == weights.shape) or means.ndim != 1:
            raise ValueError("means, sigmas, weights must be equal-length 1-d arrays")
        if means.size == 0:
            raise ValueError("mixture needs at least one component")
        if not np.all(np.isfinite(means)) or not np.all(np.isfinite(sigmas)):
            raise ValueError("mixture parameters must be finite")
        if np.any(sigmas <= 0):
            raise ValueError("mixture sigmas must be positive")
        if np.any(weights < 0) or abs(float(weights.sum()) - 1.0) > 1e-9:
            raise ValueError("mixture weights must be a simplex")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def single(cls, mean: float, sigma: float) -> "GaussianMixture":
        return cls(np.array([mean]), np.array([sigma]), np.array([1.0]))

    @classmethod
    def kde(cls, points: np.ndarray, bandwidth: float) -> "GaussianMixture":
        """Equal-weight kernel estimate with a shared Gaussian bandwidth."""
        points = np.asarray(points, dtype=float)
        n = points.size
        return cls(points, np.full(n, float(bandwidth)), np.full(n, 1.0 / n))

    def pdf(self, x: float | np.ndarray) -> float | np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) / self.sigmas
        dens = np.exp(-0.5 * z * z) / (self.sigmas * _SQRT_TWO_PI)
        out = np.sum(dens * self.weights, axis=-1)
        return float(out) if out.ndim == 0 else out

    def cdf(self, x: float | np.ndarray) -> float | np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) / self.sigmas
        out = np.sum(ndtr(z) * self.weights, axis=-1)
        return float(out) if out.ndim == 0 else out

    def mean(self) -> float:
        return float(np.sum(self.weights * self.means))

    def support_hint(self, n_sigmas: float = 10.0) -> tuple[float, float]:
        """Interval holding essentially all mass; used by quadrature-based tests."""
        lo = float(np.min(self.means - n_sigmas * self.sigmas))
        hi = float(np.max(self.means + n_sigmas * self.sigmas))
        return lo, hi
