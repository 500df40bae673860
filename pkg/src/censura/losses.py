"""Training objectives over batches of possibly-censored targets.

Each loss returns its scalar value together with analytic gradients with
respect to the model outputs, so any optimizer can chain them through a
network without automatic differentiation.

Censoring convention: a mask of 0 marks an observed label, -1 a
left-censored threshold (true value lies below the stored label) and +1 a
right-censored threshold (true value lies above it).
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, log_ndtr

from .numerics import LOG_2PI, _as_finite_array

_VALID_MASKS = (-1, 0, 1)


@dataclass
class BatchTargets:
    """Labels and censoring masks for one batch."""

    labels: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        self.labels = np.atleast_1d(_as_finite_array(self.labels, "labels"))
        self.masks = np.atleast_1d(np.asarray(self.masks, dtype=np.int64))
        if self.labels.shape != self.masks.shape:
            raise ValueError(
                f"labels and masks disagree: {self.labels.shape} vs {self.masks.shape}"
            )
        if not np.all(np.isin(self.masks, _VALID_MASKS)):
            raise ValueError("masks must take values in {-1, 0, +1}")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_censored(self):
        return int(np.count_nonzero(self.masks))


@dataclass
class EvidentialOutput:
    """Normal-inverse-gamma parameters (gamma, nu, alpha, beta) per point.

    nu and beta must be strictly positive and alpha strictly above 1, which
    the softplus(+1) network head guarantees by construction.
    """

    gamma: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.gamma = np.atleast_1d(_as_finite_array(self.gamma, "gamma"))
        self.nu = np.atleast_1d(_as_finite_array(self.nu, "nu"))
        self.alpha = np.atleast_1d(_as_finite_array(self.alpha, "alpha"))
        self.beta = np.atleast_1d(_as_finite_array(self.beta, "beta"))
        if not (np.all(self.nu > 0) and np.all(self.beta > 0)):
            raise ValueError("nu and beta must be strictly positive")
        if not np.all(self.alpha > 1):
            raise ValueError("alpha must be strictly greater than 1")


def censored_error(mu, targets):
    """One-sided error: the residual for observed labels, clamped to zero
    when a censored label is predicted on the correct side of its threshold.
    """
    mu_arr = np.atleast_1d(_as_finite_array(mu, "mu"))
    d = targets.labels - mu_arr
    eps = np.where(
        targets.masks == 0,
        d,
        np.where(targets.masks == -1, np.minimum(d, 0.0), np.maximum(d, 0.0)),
    )
    return float(eps[0]) if np.ndim(mu) == 0 else eps


def censored_mse(mu, targets):
    """Mean one-sided squared error and its gradient w.r.t. the predictions.

    Correctly-sided censored points contribute zero error and zero gradient,
    so they cause no weight updates.
    """
    mu = _as_finite_array(mu, "mu")
    if mu.size == 0:
        raise ValueError("censored_mse needs a non-empty batch")
    eps = censored_error(mu, targets)
    value = float(np.mean(eps**2))
    grad_mu = -2.0 * eps / len(targets)
    return value, grad_mu


def censored_nll(params, targets, include_constant=False):
    """Tobit negative log-likelihood: density terms for observed labels,
    CDF mass terms for censored ones.

    Observed points contribute -log pdf(y); left-censored points
    -log cdf(z) and right-censored points -log(1 - cdf(z)). The Gaussian
    constant log(2*pi)/2 enters the observed terms only when
    ``include_constant`` is set (kept out of training losses, kept in for
    evaluation). Returns the batch mean plus gradients w.r.t. mean and
    variance.
    """
    if len(targets) == 0:
        raise ValueError("censored_nll needs a non-empty batch")
    mean = np.broadcast_to(params.mean, targets.labels.shape).astype(np.float64)
    var = np.broadcast_to(params.variance, targets.labels.shape).astype(np.float64)
    y = targets.labels
    m = targets.masks
    b = len(targets)

    std = np.sqrt(var)
    t = (y - mean) / std
    log_pdf_std = -0.5 * (LOG_2PI + t * t)

    terms = np.empty(b)
    d_mean = np.empty(b)
    d_var = np.empty(b)

    obs = m == 0
    if np.any(obs):
        terms[obs] = 0.5 * np.log(var[obs]) + 0.5 * t[obs] ** 2
        if include_constant:
            terms[obs] += 0.5 * LOG_2PI
        d_mean[obs] = -(y[obs] - mean[obs]) / var[obs]
        d_var[obs] = 0.5 / var[obs] - (y[obs] - mean[obs]) ** 2 / (2.0 * var[obs] ** 2)

    left = m == -1
    if np.any(left):
        log_cdf = log_ndtr(t[left])
        terms[left] = -log_cdf
        # hazard pdf/cdf, computed in the log domain so deep tails stay finite
        ratio = np.exp(log_pdf_std[left] - log_cdf)
        d_mean[left] = ratio / std[left]
        d_var[left] = ratio * t[left] / (2.0 * var[left])

    right = m == 1
    if np.any(right):
        log_sf = log_ndtr(-t[right])
        terms[right] = -log_sf
        ratio = np.exp(log_pdf_std[right] - log_sf)
        d_mean[right] = -ratio / std[right]
        d_var[right] = -ratio * t[right] / (2.0 * var[right])

    return float(np.mean(terms)), d_mean / b, d_var / b


def evidential_loss(out, y, lam=1.0):
    """Normal-inverse-gamma marginal likelihood plus evidence regularizer.

    Returns the batch mean and analytic gradients w.r.t. gamma, nu, alpha
    and beta. The |y - gamma| subgradient at zero residual is taken as 0.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    y = np.atleast_1d(_as_finite_array(y, "y"))
    gamma, nu, alpha, beta = out.gamma, out.nu, out.alpha, out.beta
    b = y.shape[0]

    r = y - gamma
    omega = 2.0 * beta * (1.0 + nu)
    q = r * r * nu + omega

    terms = (
        0.5 * np.log(np.pi / nu)
        + gammaln(alpha)
        - gammaln(alpha + 0.5)
        - alpha * np.log(omega)
        + (alpha + 0.5) * np.log(q)
        + lam * np.abs(r) * (2.0 * nu + alpha)
    )

    d_gamma = -(alpha + 0.5) * 2.0 * r * nu / q - lam * np.sign(r) * (2.0 * nu + alpha)
    d_nu = (
        -0.5 / nu
        - alpha / (1.0 + nu)
        + (alpha + 0.5) * (r * r + 2.0 * beta) / q
        + 2.0 * lam * np.abs(r)
    )
    d_alpha = digamma(alpha) - digamma(alpha + 0.5) - np.log(omega) + np.log(q) + lam * np.abs(r)
    d_beta = -alpha / beta + (alpha + 0.5) * 2.0 * (1.0 + nu) / q

    return float(np.mean(terms)), d_gamma / b, d_nu / b, d_alpha / b, d_beta / b


def evidential_uncertainties(out):
    """Epistemic and aleatoric variances implied by the NIG parameters:
    beta / (nu * (alpha - 1)) and beta / (alpha - 1).
    """
    epistemic = out.beta / (out.nu * (out.alpha - 1.0))
    aleatoric = out.beta / (out.alpha - 1.0)
    return epistemic, aleatoric


def kl_diag_gaussians(q_means, q_stds, prior_std):
    """KL(q || prior) summed over independent Gaussian weight posteriors,
    against a zero-mean isotropic prior; plus gradients w.r.t. q.
    """
    q_means = _as_finite_array(q_means, "q_means")
    q_stds = _as_finite_array(q_stds, "q_stds")
    if np.any(q_stds <= 0):
        raise ValueError("posterior stds must be strictly positive")
    if prior_std <= 0:
        raise ValueError("prior_std must be strictly positive")
    pv = prior_std**2
    value = float(
        np.sum(np.log(prior_std / q_stds) + (q_stds**2 + q_means**2) / (2.0 * pv) - 0.5)
    )
    d_means = q_means / pv
    d_stds = -1.0 / q_stds + q_stds / pv
    return value, d_means, d_stds


def bbb_objective(likelihood_value, kl_value, kl_weight):
    """Variational free energy with a one-sample likelihood estimate:
    kl_weight * KL + data term. Censored labels affect only the data term.
    """
    return kl_weight * kl_value + likelihood_value
