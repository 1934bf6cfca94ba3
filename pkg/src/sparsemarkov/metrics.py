"""Test-set metrics computed from predictive moments of the latent function."""

import numpy as np

from .likelihoods import BernoulliLogit

# Quadrature order for test-set metrics; evaluation is cheap next to training.
EVAL_ORDER = 60


def log_predictive(likelihood, y, mean, cov):
    """Per-point log of the predictive density, the integral of p(y|f) q(f)."""
    return likelihood.log_partition(y, mean, cov, 1.0)[0]


def nlpd(log_pred):
    """Per-point (mean) negative log predictive density."""
    return float(-np.mean(log_pred))


def rmse(y, y_mean):
    return float(np.sqrt(np.mean((np.asarray(y) - np.asarray(y_mean)) ** 2)))


def error_rate(y, y_mean, threshold=0.5):
    return float(np.mean((np.asarray(y_mean) > threshold) != (np.asarray(y) > threshold)))


def evaluate(likelihood, y, mean, cov):
    """Metrics plus the per-point quantities they are computed from.

    Returns ``(metrics, log_pred, y_mean)``; ``error`` is only reported for
    binary likelihoods.
    """
    y = np.asarray(y, dtype=float)
    likelihood = likelihood.with_order(EVAL_ORDER)
    log_pred = log_predictive(likelihood, y, mean, cov)
    y_mean = likelihood.predictive_mean(mean, cov)
    out = {"nlpd": nlpd(log_pred), "rmse": rmse(y, y_mean)}
    if isinstance(likelihood, BernoulliLogit):
        out["error"] = error_rate(y, y_mean)
    return out, log_pred, y_mean


def summarize(per_fold):
    """Mean and population standard deviation of every metric across folds."""
    keys = sorted({k for row in per_fold for k in row})
    out = {}
    for k in keys:
        vals = np.array([row[k] for row in per_fold if k in row], dtype=float)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


__all__ = ["log_predictive", "nlpd", "rmse", "error_rate", "evaluate", "summarize"]
