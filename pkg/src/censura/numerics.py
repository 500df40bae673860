"""Numerically stable scalar primitives for the Gaussian family.

All functions broadcast over numpy arrays and stay finite deep in the
distribution tails: log-CDF values are accurate for standardized arguments
at least down to -40, where a naive ``log(cdf)`` underflows around -8.
Everything is computed in 64-bit floats.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr, ndtr

LOG_2PI = float(np.log(2.0 * np.pi))

# Smallest admissible predictive variance; raw variance heads are clamped
# here so downstream log/division terms stay finite.
VARIANCE_FLOOR = 1e-6


def _as_finite_array(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {x!r}")
    return arr


@dataclass
class GaussianParams:
    """Mean and variance of a Gaussian, scalar or elementwise over arrays.

    The variance is clamped to ``VARIANCE_FLOOR`` at construction, so every
    instance satisfies ``variance >= 1e-6``.
    """

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = _as_finite_array(self.mean, "mean")
        self.variance = np.maximum(
            _as_finite_array(self.variance, "variance"), VARIANCE_FLOOR
        )

    @property
    def std(self):
        return np.sqrt(self.variance)


def _maybe_scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def standardize(y, p):
    """(y - mean) / std, broadcasting over all arguments."""
    y = _as_finite_array(y, "y")
    return _maybe_scalar((y - p.mean) / p.std)


def gauss_log_pdf(y, p):
    """Log density of N(mean, variance) at y."""
    y = _as_finite_array(y, "y")
    out = -0.5 * (LOG_2PI + np.log(p.variance) + (y - p.mean) ** 2 / p.variance)
    return _maybe_scalar(out)


def gauss_cdf(y, p):
    """Gaussian CDF at y; strictly increasing in y, in (0, 1) for finite y."""
    return _maybe_scalar(ndtr(standardize(y, p)))


def gauss_log_cdf(y, p):
    """log CDF, finite and accurate for standardized y in [-40, 40]."""
    return _maybe_scalar(log_ndtr(standardize(y, p)))


def gauss_log_survival(y, p):
    """log(1 - CDF) via the reflection log(1 - F(t)) = log F(-t)."""
    return _maybe_scalar(log_ndtr(-np.asarray(standardize(y, p))))


def softplus(x):
    """log(1 + exp(x)) computed without overflow; positive and monotone."""
    return _maybe_scalar(np.logaddexp(0.0, np.asarray(x, dtype=np.float64)))


def logistic(x):
    """Derivative of softplus: 1 / (1 + exp(-x))."""
    return _maybe_scalar(expit(np.asarray(x, dtype=np.float64)))
