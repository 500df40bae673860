"""Censoring-adapted evaluation: one-sided MSE, Tobit NLL, ENCE,
confidence-based calibration curves, Mann-Whitney-Wilcoxon tests and the
ablation / model-comparison protocols built on them.

All error terms use the one-sided censored error, so a censored label
predicted on the correct side of its threshold counts as a perfect
prediction in every metric.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .losses import censored_error, censored_nll
from .numerics import VARIANCE_FLOOR, GaussianParams

#: default expected fractions for calibration curves: 0, 0.05, ..., 1
CALIBRATION_GRID = np.linspace(0.0, 1.0, 21)

#: default number of equal-frequency ENCE bins
DEFAULT_ENCE_BINS = 10

#: default significance threshold
ALPHA = 0.05


@dataclass
class CalibrationCurve:
    """Observed vs expected fractions of errors inside central CIs."""

    expected_fractions: np.ndarray
    observed_fractions: np.ndarray

    def __post_init__(self):
        self.expected_fractions = np.asarray(self.expected_fractions, dtype=np.float64)
        self.observed_fractions = np.asarray(self.observed_fractions, dtype=np.float64)
        if self.expected_fractions.shape != self.observed_fractions.shape:
            raise ValueError("expected and observed grids must have equal length")
        for name, arr in (
            ("expected_fractions", self.expected_fractions),
            ("observed_fractions", self.observed_fractions),
        ):
            if np.any((arr < 0) | (arr > 1)):
                raise ValueError(f"{name} must lie in [0, 1]")

    def max_deviation(self):
        return float(np.max(np.abs(self.observed_fractions - self.expected_fractions)))

    def to_dict(self):
        return {
            "expected": [float(v) for v in self.expected_fractions],
            "observed": [float(v) for v in self.observed_fractions],
        }


@dataclass
class EvaluationReport:
    """All metrics for one model on one dataset."""

    mse: float
    nll: float
    ence: float
    calibration: CalibrationCurve
    n_points: int
    n_censored: int
    variance_source: str
    per_repeat: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mse": self.mse,
            "nll": self.nll,
            "ence": self.ence,
            "calibration": self.calibration.to_dict(),
            "n_points": self.n_points,
            "n_censored": self.n_censored,
            "variance_source": self.variance_source,
            "per_repeat": self.per_repeat,
        }


def _selected_variance(preds, variance_source):
    """Variance channel for evaluation; the epistemic channel is floored so
    epistemic-only models read as N(mean, variance) distributions."""
    v = preds.variance(variance_source)
    if variance_source == "epistemic":
        v = np.maximum(v, VARIANCE_FLOOR)
    return v


def eval_mse(preds, targets):
    """Mean one-sided squared error of the predicted means."""
    if len(targets) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    eps = censored_error(preds.mean, targets)
    return float(np.mean(np.square(eps)))


def eval_nll(preds, targets, variance_source):
    """Tobit negative log-likelihood with all constant terms included."""
    var = _selected_variance(preds, variance_source)
    params = GaussianParams(mean=preds.mean, variance=var)
    value, _, _ = censored_nll(params, targets, include_constant=True)
    return value


def ence_bins(preds, targets, variance_source, n_bins=DEFAULT_ENCE_BINS):
    """Per-bin (RMSE, RMV) pairs over equal-count bins sorted by variance.

    When the count does not divide evenly the remainder is spread over the
    first bins.
    """
    m = len(targets)
    if not 1 <= n_bins <= m:
        raise ValueError(f"need M >= n_bins >= 1, got M={m}, n_bins={n_bins}")
    var = _selected_variance(preds, variance_source)
    if np.any(var <= 0):
        raise ValueError("all selected variances must be positive")
    eps = np.square(censored_error(preds.mean, targets))
    order = np.argsort(var, kind="stable")
    rmse, rmv = [], []
    for bin_idx in np.array_split(order, n_bins):
        rmse.append(float(np.sqrt(np.mean(eps[bin_idx]))))
        rmv.append(float(np.sqrt(np.mean(var[bin_idx]))))
    return np.asarray(rmse), np.asarray(rmv)


def eval_ence(preds, targets, variance_source, n_bins=DEFAULT_ENCE_BINS):
    """Expected normalized calibration error: mean over bins of
    |RMSE - RMV| / RMV."""
    rmse, rmv = ence_bins(preds, targets, variance_source, n_bins)
    if np.any(rmv == 0):
        raise ValueError("a bin has zero root mean variance (degenerate model)")
    return float(np.mean(np.abs(rmse - rmv) / rmv))


def calibration_curve(preds, targets, variance_source, grid=None):
    """Observed fraction of one-sided errors inside the central CI implied
    by each expected fraction.

    A correctly-sided censored point has zero error and therefore lies
    inside every interval, including the zero-width one at p = 0.
    """
    if grid is None:
        grid = CALIBRATION_GRID
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("calibration grid must be non-empty")
    if np.any((grid < 0) | (grid > 1)):
        raise ValueError("calibration grid must lie in [0, 1]")
    std = np.sqrt(_selected_variance(preds, variance_source))
    abs_eps = np.abs(censored_error(preds.mean, targets))
    observed = np.empty_like(grid)
    for i, p in enumerate(grid):
        if p >= 1.0:
            observed[i] = 1.0
        else:
            half = ndtri((1.0 + p) / 2.0) * std
            observed[i] = float(np.mean(abs_eps <= half))
    return CalibrationCurve(expected_fractions=grid, observed_fractions=observed)


def inverse_normal_cdf(p):
    """Standard normal quantile function, |error| < 1e-9 on (0, 1)."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any((arr <= 0) | (arr >= 1)):
        raise ValueError("p must lie strictly inside (0, 1)")
    out = ndtri(arr)
    return float(out) if np.ndim(p) == 0 else out


def evaluate(preds, targets, variance_source, n_bins=DEFAULT_ENCE_BINS, grid=None):
    """Full evaluation report for one model on one dataset."""
    return EvaluationReport(
        mse=eval_mse(preds, targets),
        nll=eval_nll(preds, targets, variance_source),
        ence=eval_ence(preds, targets, variance_source, n_bins),
        calibration=calibration_curve(preds, targets, variance_source, grid),
        n_points=len(targets),
        n_censored=targets.n_censored,
        variance_source=variance_source,
    )


# ---------------------------------------------------------------------------
# rank statistics
# ---------------------------------------------------------------------------


def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


_EXACT_LIMIT = 16  # enumerate the null distribution up to this pooled size


def mann_whitney_u(a, b, alternative="two_sided"):
    """Mann-Whitney U statistic (for the first sample) and p-value.

    The p-value is exact by full enumeration of rank assignments when the
    pooled size is at most 16 and there are no ties, and otherwise uses the
    normal approximation with tie and continuity corrections.
    ``alternative`` 'less' means the first sample tends to be smaller.
    """
    if alternative not in ("two_sided", "less", "greater"):
        raise ValueError(f"unknown alternative {alternative!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n_a, n_b = a.size, b.size
    if n_a == 0 or n_b == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u_a = float(np.sum(ranks[:n_a]) - n_a * (n_a + 1) / 2.0)

    has_ties = np.unique(pooled).size < pooled.size
    if not has_ties and n_a + n_b <= _EXACT_LIMIT:
        p_less, p_greater = _exact_tail_probs(n_a, n_b, u_a)
    else:
        p_less, p_greater = _normal_tail_probs(ranks, n_a, n_b, u_a)

    if alternative == "less":
        p = p_less
    elif alternative == "greater":
        p = p_greater
    else:
        p = min(1.0, 2.0 * min(p_less, p_greater))
    return u_a, float(p)


def _exact_tail_probs(n_a, n_b, u_obs):
    n = n_a + n_b
    base = n_a * (n_a + 1) // 2
    at_most = 0
    at_least = 0
    total = 0
    for positions in itertools.combinations(range(n), n_a):
        u = sum(positions) + n_a - base
        total += 1
        if u <= u_obs:
            at_most += 1
        if u >= u_obs:
            at_least += 1
    return at_most / total, at_least / total


def _normal_tail_probs(ranks, n_a, n_b, u_a):
    n = n_a + n_b
    _, counts = np.unique(ranks, return_counts=True)
    tie_factor = 1.0 - np.sum(counts**3 - counts) / (n**3 - n)
    sigma2 = n_a * n_b * (n + 1) / 12.0 * tie_factor
    if sigma2 <= 0:
        return 1.0, 1.0
    mu = n_a * n_b / 2.0
    sd = np.sqrt(sigma2)
    p_less = float(ndtr((u_a - mu + 0.5) / sd))
    p_greater = float(ndtr((mu - u_a + 0.5) / sd))
    return p_less, p_greater


def ablation_delta_nll(observed_scores, censored_scores, alpha=ALPHA,
                       alternative="two_sided"):
    """Mean NLL gap between the observed-only and censored-trained arms.

    Positive and significant favors training with censored labels.
    Returns (delta, p_value, verdict) with verdict one of
    'censored_better', 'observed_better', 'inconclusive'.
    """
    obs = np.asarray(observed_scores, dtype=np.float64)
    cen = np.asarray(censored_scores, dtype=np.float64)
    if obs.size < 2 or cen.size < 2:
        raise ValueError("need at least 2 repeats per arm")
    delta = float(np.mean(obs) - np.mean(cen))
    _, p = mann_whitney_u(obs, cen, alternative=alternative)
    if p < alpha and delta > 0:
        verdict = "censored_better"
    elif p < alpha and delta < 0:
        verdict = "observed_better"
    else:
        verdict = "inconclusive"
    return delta, p, verdict


def compare_models(scores, lower_is_better=True, alpha=ALPHA):
    """Rank models by mean score and star every model not statistically
    worse than the best one (one-sided Mann-Whitney-Wilcoxon test).

    ``scores`` maps model name to its list of repeated metric values.
    Returns rows sorted best-first with fields model, mean, starred and
    p_vs_best.
    """
    if not scores:
        raise ValueError("no models to compare")
    means = {name: float(np.mean(vals)) for name, vals in scores.items()}
    best = min(means, key=lambda k: means[k] if lower_is_better else -means[k])
    alt = "less" if lower_is_better else "greater"
    rows = []
    for name, vals in scores.items():
        if name == best:
            rows.append({"model": name, "mean": means[name], "starred": True,
                         "p_vs_best": None})
            continue
        _, p = mann_whitney_u(scores[best], vals, alternative=alt)
        rows.append({"model": name, "mean": means[name], "starred": p >= alpha,
                     "p_vs_best": p})
    rows.sort(key=lambda r: r["mean"] if lower_is_better else -r["mean"])
    return rows
