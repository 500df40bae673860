"""Synthetic data with known ground truth for end-to-end verification.

Draws standard-normal features, applies a known mean function and known
(optionally feature-dependent) noise, then censors rows against thresholds
that never depend on the hidden true values given the features. The
default scales mimic p-scale assay labels: means around [4, 9] and noise
standard deviations within [0.1, 0.35].
"""

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import CensoredDataset
from .models import UncertainPrediction
from .numerics import logistic
from .rng import derive_rng, standard_normal

MEAN_FUNCTIONS = ("linear", "sine_mixture", "mlp_teacher")
NOISE_PROFILES = ("constant", "feature_dependent")
CENSOR_RULES = ("none", "fixed_left", "quantile_left", "mixed")

_MIN_SIGMA = 1e-3
_CALIBRATION_DRAWS = 65536  # independent sample used to place quantile thresholds


@dataclass
class SynthSpec:
    """Recipe for one synthetic dataset.

    The feature-dependent noise profile is sigma(x) = sigma_base +
    sigma_scale * logistic(sigma_rate * x_1). ``drift_per_fold`` shifts the
    mean function stepwise across the five date-ordered fifths of the data,
    mimicking the temporal drift of project-focused assays.
    """

    n_points: int
    feature_dim: int = 8
    mean_function: str = "linear"
    linear_weights: list = None  # default: unit-norm direction drawn from seed
    linear_bias: float = 6.5
    teacher_seed: int = 0
    noise_profile: str = "constant"
    sigma: float = 0.25
    sigma_base: float = 0.1
    sigma_scale: float = 0.25
    sigma_rate: float = 2.0
    censor_rule: str = "none"
    fixed_threshold: float = None
    q_left: float = 0.0
    q_right: float = 0.0
    rows_per_day: int = 1
    drift_per_fold: float = 0.0

    def __post_init__(self):
        if self.n_points < 1 or self.feature_dim < 1:
            raise ValueError("n_points and feature_dim must be >= 1")
        if self.mean_function not in MEAN_FUNCTIONS:
            raise ValueError(f"unknown mean_function {self.mean_function!r}")
        if self.noise_profile not in NOISE_PROFILES:
            raise ValueError(f"unknown noise_profile {self.noise_profile!r}")
        if self.censor_rule not in CENSOR_RULES:
            raise ValueError(f"unknown censor_rule {self.censor_rule!r}")
        if self.noise_profile == "constant" and self.sigma < _MIN_SIGMA:
            raise ValueError(f"sigma must be >= {_MIN_SIGMA}")
        if self.noise_profile == "feature_dependent" and (
            self.sigma_base < _MIN_SIGMA or self.sigma_scale < 0
        ):
            raise ValueError("sigma_base must be >= 1e-3 and sigma_scale >= 0")
        if not (0.0 <= self.q_left < 1.0 and 0.0 <= self.q_right < 1.0):
            raise ValueError("censoring quantiles must lie in [0, 1)")
        if self.q_left + self.q_right >= 1.0:
            raise ValueError("q_left + q_right must be < 1")
        if self.censor_rule == "fixed_left" and self.fixed_threshold is None:
            raise ValueError("fixed_left needs fixed_threshold")
        if self.rows_per_day < 1:
            raise ValueError("rows_per_day must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class GroundTruth:
    """Everything the generator knows: hidden true values, the true mean
    and noise at each point, and the censoring threshold where applied."""

    y_star: np.ndarray
    true_mean: np.ndarray
    true_sigma: np.ndarray
    thresholds: np.ndarray  # nan where no threshold applied
    ids: np.ndarray

    @property
    def noise_floor(self):
        """Mean irreducible squared error, E[sigma(x)^2]."""
        return float(np.mean(self.true_sigma**2))


def _mean_values(spec, x, seed):
    if spec.mean_function == "linear":
        if spec.linear_weights is not None:
            w = np.asarray(spec.linear_weights, dtype=np.float64)
            if w.shape != (spec.feature_dim,):
                raise ValueError("linear_weights must match feature_dim")
        else:
            raw = standard_normal(derive_rng(seed, 1), spec.feature_dim)
            w = raw / np.linalg.norm(raw)
        return spec.linear_bias + x @ w
    if spec.mean_function == "sine_mixture":
        terms = np.zeros(x.shape[0])
        amps = (1.0, 0.5, 0.25)
        freqs = (2.0, 3.0, 5.0)
        for j in range(min(3, spec.feature_dim)):
            terms += amps[j] * np.sin(freqs[j] * x[:, j] + j)
        return spec.linear_bias + terms
    # mlp_teacher: a fixed random two-layer tanh network
    rng = derive_rng(spec.teacher_seed, 9)
    w1 = standard_normal(rng, (spec.feature_dim, 16)) / np.sqrt(spec.feature_dim)
    w2 = standard_normal(rng, 16) / 4.0
    return spec.linear_bias + 2.0 * np.tanh(x @ w1) @ w2


def _sigma_values(spec, x):
    if spec.noise_profile == "constant":
        return np.full(x.shape[0], float(spec.sigma))
    return spec.sigma_base + spec.sigma_scale * np.asarray(
        logistic(spec.sigma_rate * x[:, 0])
    )


def _raw_draw(spec, seed, n, x_stream, eps_stream):
    """Features, means, sigmas and hidden true values for n points."""
    x = standard_normal(derive_rng(seed, x_stream), (n, spec.feature_dim))
    mean = _mean_values(spec, x, seed)
    if spec.drift_per_fold:
        fold = (5 * np.arange(n)) // n
        mean = mean + spec.drift_per_fold * fold
    sigma = _sigma_values(spec, x)
    y_star = mean + sigma * standard_normal(derive_rng(seed, eps_stream), n)
    return x, mean, sigma, y_star


def generate(spec, seed):
    """Draw one dataset plus its ground truth; bitwise reproducible.

    Quantile censoring rules place their thresholds using an independent
    calibration draw of the same generative process, so thresholds stay
    conditionally independent of the hidden true values given the features.
    """
    n = spec.n_points
    x, mean, sigma, y_star = _raw_draw(spec, seed, n, x_stream=0, eps_stream=2)

    z_left = z_right = None
    if spec.censor_rule == "fixed_left":
        z_left = float(spec.fixed_threshold)
    elif spec.censor_rule in ("quantile_left", "mixed"):
        _, _, _, cal_y = _raw_draw(
            spec, seed + 1, _CALIBRATION_DRAWS, x_stream=3, eps_stream=4
        )
        if spec.q_left > 0:
            z_left = float(np.quantile(cal_y, spec.q_left))
        if spec.censor_rule == "mixed" and spec.q_right > 0:
            z_right = float(np.quantile(cal_y, 1.0 - spec.q_right))

    labels = y_star.copy()
    masks = np.zeros(n, dtype=np.int64)
    thresholds = np.full(n, np.nan)
    if z_left is not None:
        below = y_star < z_left
        labels[below] = z_left
        masks[below] = -1
        thresholds[below] = z_left
    if z_right is not None:
        above = (y_star > z_right) & (masks == 0)
        labels[above] = z_right
        masks[above] = 1
        thresholds[above] = z_right

    dates = np.datetime64("2020-01-01") + (np.arange(n) // spec.rows_per_day)
    ids = np.array([f"s{i:07d}" for i in range(n)])
    ds = CensoredDataset(
        features=x, labels=labels, masks=masks, dates=dates, ids=ids
    )
    gt = GroundTruth(
        y_star=y_star, true_mean=mean, true_sigma=sigma,
        thresholds=thresholds, ids=ids,
    )
    return ds, gt


def oracle_predictions(gt):
    """The unbeatable reference predictor: the true mean with the true
    noise variance as aleatoric uncertainty and zero epistemic variance."""
    return UncertainPrediction(
        mean=gt.true_mean,
        aleatoric_variance=gt.true_sigma**2,
        epistemic_variance=np.zeros_like(gt.true_mean),
    )


def save_ground_truth(gt, path):
    """Sidecar CSV: id, y_star, true_mean, true_sigma (lossless floats)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "y_star", "true_mean", "true_sigma"])
        for i in range(gt.y_star.shape[0]):
            writer.writerow(
                [
                    str(gt.ids[i]),
                    repr(float(gt.y_star[i])),
                    repr(float(gt.true_mean[i])),
                    repr(float(gt.true_sigma[i])),
                ]
            )


def load_ground_truth(path):
    ids, y_star, true_mean, true_sigma = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            ids.append(row["id"])
            y_star.append(float(row["y_star"]))
            true_mean.append(float(row["true_mean"]))
            true_sigma.append(float(row["true_sigma"]))
    return GroundTruth(
        y_star=np.asarray(y_star),
        true_mean=np.asarray(true_mean),
        true_sigma=np.asarray(true_sigma),
        thresholds=np.full(len(ids), np.nan),
        ids=np.asarray(ids),
    )
