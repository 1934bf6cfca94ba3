"""Observation models with the expectations and derivatives the inference algorithms need.

All batched operations take ``y`` of shape (N,), latent means of shape (N, o)
and latent covariances of shape (N, o, o).
"""

import copy
from dataclasses import dataclass, fields, replace
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit, gammaln, logsumexp

from .errors import LikelihoodDomainError, ParameterDomainError, UnsupportedDimensionError
from .linalg import psd_sqrt

LOG_2PI = np.log(2 * np.pi)
DEFAULT_ORDER = 20


@dataclass(frozen=True)
class CubatureRule:
    """Product Gauss-Hermite rule for a standard normal in ``dim`` dimensions."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def dim(self):
        return self.nodes.shape[1]


@lru_cache(maxsize=None)
def cubature_rule(dim, order=DEFAULT_ORDER):
    """Nodes (order**dim, dim) and weights summing to one."""
    if dim > 3:
        raise UnsupportedDimensionError(f"cubature in {dim} dimensions is not supported")
    x, w = hermegauss(order)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return CubatureRule(nodes, weights)


def _as_batch(y, mean, cov, o):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mean = np.asarray(mean, dtype=float).reshape(-1, o)
    cov = np.asarray(cov, dtype=float).reshape(-1, o, o)
    return y, mean, cov


def _points(mean, cov, rule):
    """Cubature points f = mean + sqrt(cov) xi, shape (N, K, o)."""
    root = psd_sqrt(cov)
    return mean[:, None, :] + np.einsum("nij,kj->nki", root, rule.nodes)


class Likelihood:
    """Base class; subclasses provide log densities with their f-gradients and Hessians."""

    kind = ""
    latent_dim = 1
    order = DEFAULT_ORDER

    def hyperparameters(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name in self.trainable}

    def with_hyperparameters(self, values):
        return replace(self, **{k: float(v) for k, v in values.items()})

    trainable = ()

    def with_order(self, order):
        """Copy that integrates with a Gauss-Hermite rule of the given order."""
        out = copy.copy(self)
        object.__setattr__(out, "order", int(order))
        return out

    def to_dict(self):
        out = {"type": self.kind}
        out.update({f.name: float(getattr(self, f.name)) for f in fields(self)})
        return out

    def validate(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise LikelihoodDomainError("observations must be finite")
        return y

    # Per-variant pieces, all elementwise over leading axes of f (..., o).
    def _logp(self, y, f):
        raise NotImplementedError

    def _derivs(self, y, f):
        """Log density, gradient (..., o) and Hessian (..., o, o) in f."""
        raise NotImplementedError

    def _moments(self, f):
        """E[y|f] (...,), Var[y|f] (...,), dE/df (..., o)."""
        raise NotImplementedError

    def log_density(self, y, f):
        """log p(y | f); ``f`` has trailing dimension o (scalars allowed when o = 1)."""
        y = self.validate(y)
        f = np.asarray(f, dtype=float)
        if self.latent_dim == 1 and (f.ndim == 0 or f.shape[-1] != 1):
            f = f[..., None]
        return self._logp(y, f)

    def conditional_moments(self, f):
        """E[y|f], Cov[y|f] and the Jacobian dE[y|f]/df."""
        f = np.asarray(f, dtype=float)
        if self.latent_dim == 1 and (f.ndim == 0 or f.shape[-1] != 1):
            f = f[..., None]
        return self._moments(f)

    def variational_expectation(self, y, mean, cov):
        """E_N(f; mean, cov)[log p(y|f)] with its gradients in mean and cov."""
        o = self.latent_dim
        y, mean, cov = _as_batch(self.validate(y), mean, cov, o)
        rule = cubature_rule(o, self.order)
        f = _points(mean, cov, rule)
        logp, grad, hess = self._derivs(y[:, None], f)
        w = rule.weights
        value = logp @ w
        dmean = np.einsum("k,nki->ni", w, grad)
        dcov = 0.5 * np.einsum("k,nkij->nij", w, hess)
        return value, dmean, dcov

    def log_partition(self, y, mean, cov, alpha=1.0):
        """log E_N(f; mean, cov)[p(y|f)^alpha] with gradient and Hessian in ``mean``.

        The derivatives are exact derivatives of the cubature estimate: tilted
        averages of the score and of its Jacobian.
        """
        _check_alpha(alpha)
        o = self.latent_dim
        y, mean, cov = _as_batch(self.validate(y), mean, cov, o)
        rule = cubature_rule(o, self.order)
        f = _points(mean, cov, rule)
        logp, grad, hess = self._derivs(y[:, None], f)
        logw = alpha * logp + np.log(rule.weights)
        logz = logsumexp(logw, axis=1)
        pi = np.exp(logw - logz[:, None])
        score = alpha * grad
        g = np.einsum("nk,nki->ni", pi, score)
        second = (np.einsum("nk,nkij->nij", pi, alpha * hess + score[..., :, None] * score[..., None, :])
                  - g[:, :, None] * g[:, None, :])
        return logz, g, 0.5 * (second + np.swapaxes(second, 1, 2))

    def slr_moments(self, mean, cov):
        """Statistical linear regression moments over f ~ N(mean, cov).

        Returns omega = E[E[y|f]] (N,), B = Var of y under the model (N,) and
        C = Cov[f, E[y|f]] (N, o).
        """
        o = self.latent_dim
        mean = np.asarray(mean, dtype=float).reshape(-1, o)
        cov = np.asarray(cov, dtype=float).reshape(-1, o, o)
        rule = cubature_rule(o, self.order)
        f = _points(mean, cov, rule)
        ey, vy, _ = self._moments(f)
        w = rule.weights
        omega = ey @ w
        dev = ey - omega[:, None]
        B = (dev ** 2) @ w + vy @ w
        C = np.einsum("k,nki,nk->ni", w, f - mean[:, None, :], dev)
        return omega, B, C

    def predictive_mean(self, mean, cov):
        """E[y] under f ~ N(mean, cov)."""
        return self.slr_moments(mean, cov)[0]


def _check_alpha(alpha):
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")


@dataclass(frozen=True)
class Gaussian(Likelihood):
    variance: float = 1.0

    kind = "gaussian"
    trainable = ("variance",)

    def __post_init__(self):
        if not np.isfinite(self.variance) or self.variance <= 0:
            raise ParameterDomainError(f"noise variance must be positive, got {self.variance}")

    def _logp(self, y, f):
        return -0.5 * (LOG_2PI + np.log(self.variance) + (y - f[..., 0]) ** 2 / self.variance)

    def _derivs(self, y, f):
        r = y - f[..., 0]
        logp = -0.5 * (LOG_2PI + np.log(self.variance) + r ** 2 / self.variance)
        return logp, (r / self.variance)[..., None], np.full(r.shape + (1, 1), -1.0 / self.variance)

    def _moments(self, f):
        e = f[..., 0]
        return e, np.full_like(e, self.variance), np.ones_like(f)

    def variational_expectation(self, y, mean, cov):
        y, mean, cov = _as_batch(self.validate(y), mean, cov, 1)
        r = y - mean[:, 0]
        s = cov[:, 0, 0]
        value = -0.5 * (LOG_2PI + np.log(self.variance) + (r ** 2 + s) / self.variance)
        return value, (r / self.variance)[:, None], np.full((len(y), 1, 1), -0.5 / self.variance)

    def log_partition(self, y, mean, cov, alpha=1.0):
        _check_alpha(alpha)
        y, mean, cov = _as_batch(self.validate(y), mean, cov, 1)
        tot = self.variance / alpha + cov[:, 0, 0]
        r = y - mean[:, 0]
        logz = (0.5 * (1 - alpha) * (LOG_2PI + np.log(self.variance)) - 0.5 * np.log(alpha)
                - 0.5 * (LOG_2PI + np.log(tot) + r ** 2 / tot))
        return logz, (r / tot)[:, None], (-1.0 / tot)[:, None, None]


@dataclass(frozen=True)
class BernoulliLogit(Likelihood):
    kind = "bernoulli"

    def validate(self, y):
        y = super().validate(y)
        if not np.all((y == 0) | (y == 1)):
            raise LikelihoodDomainError("Bernoulli observations must be 0 or 1")
        return y

    def _logp(self, y, f):
        f = f[..., 0]
        return y * f - np.logaddexp(0.0, f)

    def _derivs(self, y, f):
        f = f[..., 0]
        p = expit(f)
        logp = y * f - np.logaddexp(0.0, f)
        return logp, (y - p)[..., None], (-p * (1 - p))[..., None, None]

    def _moments(self, f):
        p = expit(f[..., 0])
        v = p * (1 - p)
        return p, v, v[..., None]


@dataclass(frozen=True)
class PoissonLog(Likelihood):
    """Counts with intensity binsize * exp(f)."""

    binsize: float = 1.0

    kind = "poisson"

    def __post_init__(self):
        if not np.isfinite(self.binsize) or self.binsize <= 0:
            raise ParameterDomainError(f"bin size must be positive, got {self.binsize}")

    def validate(self, y):
        y = super().validate(y)
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise LikelihoodDomainError("Poisson observations must be non-negative integers")
        return y

    def _const(self, y):
        return y * np.log(self.binsize) - gammaln(y + 1)

    def _logp(self, y, f):
        f = f[..., 0]
        return y * f - self.binsize * np.exp(f) + self._const(y)

    def _derivs(self, y, f):
        f = f[..., 0]
        rate = self.binsize * np.exp(f)
        return y * f - rate + self._const(y), (y - rate)[..., None], (-rate)[..., None, None]

    def _moments(self, f):
        rate = self.binsize * np.exp(f[..., 0])
        return rate, rate, rate[..., None]

    def variational_expectation(self, y, mean, cov):
        y, mean, cov = _as_batch(self.validate(y), mean, cov, 1)
        m, s = mean[:, 0], cov[:, 0, 0]
        rate = self.binsize * np.exp(m + 0.5 * s)
        value = y * m - rate + self._const(y)
        return value, (y - rate)[:, None], (-0.5 * rate)[:, None, None]


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class HeteroscedasticGaussian(Likelihood):
    """y ~ N(f1, softplus(f2)^2)."""

    kind = "heteroscedastic"
    latent_dim = 2

    def _logp(self, y, f):
        s = softplus(f[..., 1])
        return -0.5 * LOG_2PI - np.log(s) - 0.5 * (y - f[..., 0]) ** 2 / s ** 2

    def _derivs(self, y, f):
        f1, f2 = f[..., 0], f[..., 1]
        s = softplus(f2)
        ds = expit(f2)
        dds = ds * (1 - ds)
        r = y - f1
        logp = -0.5 * LOG_2PI - np.log(s) - 0.5 * r ** 2 / s ** 2
        d_s = -1.0 / s + r ** 2 / s ** 3
        dd_s = 1.0 / s ** 2 - 3.0 * r ** 2 / s ** 4
        grad = np.stack([r / s ** 2, d_s * ds], axis=-1)
        h11 = -1.0 / s ** 2
        h12 = -2.0 * r * ds / s ** 3
        h22 = dd_s * ds ** 2 + d_s * dds
        hess = np.stack([np.stack([h11, h12], -1), np.stack([h12, h22], -1)], -2)
        return logp, grad, hess

    def _moments(self, f):
        s = softplus(f[..., 1])
        jac = np.zeros_like(f)
        jac[..., 0] = 1.0
        return f[..., 0].copy(), s ** 2, jac


LIKELIHOODS = {cls.kind: cls for cls in (Gaussian, BernoulliLogit, PoissonLog, HeteroscedasticGaussian)}


def likelihood_from_dict(data):
    data = dict(data)
    kind = data.pop("type")
    if kind not in LIKELIHOODS:
        raise ParameterDomainError(f"unknown likelihood type {kind!r}")
    return LIKELIHOODS[kind](**data)
