"""Tied Gaussian sites over consecutive inducing states and the resulting chain posterior."""

from dataclasses import dataclass

import numpy as np

from .chain import _transition, backward_transition, state_conditionals
from .errors import FilterDivergenceError
from .linalg import cholesky_jitter, sym


@dataclass(frozen=True)
class TiedSite:
    """t(v) = exp(logz) exp(v'lam1 - v'lam2 v / 2) over one pair v = [u_m, u_{m+1}]."""

    lam1: np.ndarray
    lam2: np.ndarray
    logz: float


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Sites:
    """The M-1 tied sites of a chain, stored as stacked natural parameters."""

    lam1: np.ndarray
    lam2: np.ndarray
    logz: np.ndarray

    def __post_init__(self):
        lam2 = np.asarray(self.lam2, dtype=float)
        object.__setattr__(self, "lam1", _frozen(self.lam1))
        object.__setattr__(self, "lam2", _frozen(sym(lam2)))
        object.__setattr__(self, "logz", _frozen(self.logz))
        n, k = self.lam1.shape
        if self.lam2.shape != (n, k, k) or self.logz.shape != (n,):
            raise ValueError("inconsistent site shapes")

    @classmethod
    def zeros(cls, num_segments, d):
        return cls(np.zeros((num_segments, 2 * d)), np.zeros((num_segments, 2 * d, 2 * d)),
                   np.zeros(num_segments))

    @classmethod
    def from_list(cls, sites):
        return cls(np.stack([s.lam1 for s in sites]), np.stack([s.lam2 for s in sites]),
                   np.array([s.logz for s in sites], dtype=float))

    def __len__(self):
        return self.logz.size

    def __getitem__(self, m):
        return TiedSite(self.lam1[m], self.lam2[m], float(self.logz[m]))

    @property
    def state_dim(self):
        return self.lam1.shape[1] // 2

    def storage_size(self):
        """Number of stored scalars."""
        return self.lam1.size + self.lam2.size + self.logz.size

    def scaled(self, k):
        return Sites(self.lam1 * k, self.lam2 * k, self.logz * k)

    def mix(self, other, step):
        """Convex combination (1 - step) self + step other in natural parameters."""
        return Sites((1 - step) * self.lam1 + step * other.lam1,
                     (1 - step) * self.lam2 + step * other.lam2,
                     (1 - step) * self.logz + step * other.logz)

    def max_change(self, other):
        return max(np.abs(self.lam1 - other.lam1).max(initial=0.0),
                   np.abs(self.lam2 - other.lam2).max(initial=0.0))


def site_from_natural_fraction(site, k):
    """The fractional site t^k, scaling natural parameters and log constant by ``k``."""
    if not 0 < k <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {k}")
    if isinstance(site, Sites):
        return site.scaled(k)
    return TiedSite(site.lam1 * k, site.lam2 * k, site.logz * k)


@dataclass(frozen=True)
class Filtered:
    """Forward-filter output.

    ``means[m]``/``covs[m]`` hold q^f(u_m), which includes the sites of segments
    strictly before m. ``pair_means[m]``/``pair_covs[m]`` hold q^f(v_m), which
    also includes site m. ``log_c[m]`` is the log normaliser of step m.
    """

    means: np.ndarray
    covs: np.ndarray
    pair_means: np.ndarray
    pair_covs: np.ndarray
    log_c: np.ndarray

    @property
    def log_norm(self):
        return float(self.log_c.sum())


def _first_not_pd(S):
    """Index of the first matrix in the stack that fails the jittered Cholesky test, or None."""
    if not len(S):
        return None
    try:
        np.linalg.cholesky(S)
        return None
    except np.linalg.LinAlgError:
        pass
    for i, Si in enumerate(S):
        try:
            cholesky_jitter(Si)
        except np.linalg.LinAlgError:
            return i
    return None


def _run_filter(A, Q, P0, lam1, lam2, logz):
    M = len(A) + 1
    d = P0.shape[0]
    k = 2 * d
    eye = np.eye(k)
    means = np.zeros((M, d))
    covs = np.zeros((M, d, d))
    pair_means = np.zeros((M - 1, k))
    pair_covs = np.zeros((M - 1, k, k))
    prior_means = np.zeros((M - 1, k))
    gains = np.broadcast_to(eye, (M - 1, k, k)).copy()
    active = np.any(lam2 != 0, axis=(1, 2)) | np.any(lam1 != 0, axis=1)
    rhs = np.empty((k, k + 1))
    m, P = np.zeros(d), P0.copy()
    means[0], covs[0] = m, P
    for i in range(M - 1):
        Ai = A[i]
        PA = P @ Ai.T
        S = pair_covs[i]
        S[:d, :d] = P
        S[:d, d:] = PA
        S[d:, :d] = PA.T
        S[d:, d:] = Ai @ PA + Q[i]
        mu = pair_means[i]
        mu[:d] = m
        mu[d:] = Ai @ m
        if active[i]:
            # multiply by the site in moment form, as in linalg.times_site
            prior_means[i] = mu
            G = gains[i]
            G += S @ lam2[i]
            rhs[:, :k] = S
            rhs[:, k] = mu
            sol = np.linalg.solve(G, rhs)
            S[:] = 0.5 * (sol[:, :k] + sol[:, :k].T)
            mu[:] = sol[:, k] + S @ lam1[i]
        m, P = mu[d:], S[d:, d:]
        means[i + 1], covs[i + 1] = m, P

    # log normalisers and validity, batched over the steps that carried a site
    log_c = np.array(logz, dtype=float)
    bad = np.zeros(M - 1, dtype=bool)
    idx = np.flatnonzero(active)
    if idx.size:
        G = gains[idx]
        S = pair_covs[idx]
        l1, l2 = lam1[idx], lam2[idx]
        mu0 = prior_means[idx]
        a = np.linalg.solve(G, mu0[..., None])[..., 0]
        sign, logdet = np.linalg.slogdet(G)
        quad = (np.einsum("ni,nij,nj->n", l1, S, l1) + 2.0 * np.einsum("ni,ni->n", l1, a)
                - np.einsum("ni,nij,nj->n", mu0, l2, a))
        with np.errstate(invalid="ignore"):
            log_int = -0.5 * logdet + 0.5 * quad
        bad[idx] = (sign <= 0) | ~np.isfinite(log_int)
        log_c[idx] += np.where(bad[idx], 0.0, log_int)
        first = _first_not_pd(S)
        if first is not None:
            bad[idx[first]] = True
    if bad.any():
        raise FilterDivergenceError(int(np.argmax(bad)) + 1)
    return Filtered(means, covs, pair_means, pair_covs, log_c)


def filter(chain, sites):
    """Forward filter over the chain with the tied sites applied."""
    if len(sites) != chain.M - 1:
        raise ValueError(f"expected {chain.M - 1} sites, got {len(sites)}")
    return _run_filter(chain.A, chain.Q, chain.P0, sites.lam1, sites.lam2, sites.logz)


@dataclass(frozen=True)
class ChainPosterior:
    """Smoothed single and pairwise marginals of the inducing states."""

    means: np.ndarray
    covs: np.ndarray
    pair_means: np.ndarray
    pair_covs: np.ndarray
    log_norm: float
    filtered: Filtered
    sites: Sites

    @property
    def d(self):
        return self.means.shape[1]


def _smoother_gains(S12, S22):
    """Batched S12 S22^-1, with a pseudo-inverse wherever S22 is singular."""
    try:
        return np.swapaxes(np.linalg.solve(S22, np.swapaxes(S12, 1, 2)), 1, 2)
    except np.linalg.LinAlgError:
        out = np.empty_like(S12)
        for i in range(len(S12)):
            try:
                out[i] = np.linalg.solve(S22[i], S12[i].T).T
            except np.linalg.LinAlgError:
                out[i] = S12[i] @ np.linalg.pinv(S22[i])
        return out


def smooth(chain, sites, filtered):
    """Backward pass combining each filtered pair with the smoothed next state."""
    M, d = chain.M, chain.d
    means = filtered.means.copy()
    covs = filtered.covs.copy()
    fm, fS = filtered.pair_means, filtered.pair_covs
    gains = _smoother_gains(fS[:, :d, d:], fS[:, d:, d:])
    for i in range(M - 2, -1, -1):
        G = gains[i]
        means[i] = fm[i, :d] + G @ (means[i + 1] - fm[i, d:])
        P1 = fS[i, :d, :d] + G @ (covs[i + 1] - fS[i, d:, d:]) @ G.T
        covs[i] = 0.5 * (P1 + P1.T)
    first = _first_not_pd(covs[:-1][::-1])
    if first is not None:
        step = M - 1 - first
        raise FilterDivergenceError(step, f"smoothed covariance not positive definite at step {step}")
    cross = gains @ covs[1:]
    pair_means = np.concatenate([means[:-1], means[1:]], axis=1)
    pair_covs = np.concatenate([np.concatenate([covs[:-1], cross], axis=2),
                                np.concatenate([np.swapaxes(cross, 1, 2), covs[1:]], axis=2)], axis=1)
    return ChainPosterior(means, covs, pair_means, pair_covs, filtered.log_norm, filtered, sites)


def posterior(chain, sites):
    """Filter then smooth."""
    return smooth(chain, sites, filter(chain, sites))


def backward_log_normalizer(chain, sites):
    """The log normaliser computed by filtering the reversed chain."""
    d = chain.d
    B, S = backward_transition(chain.sde, np.diff(chain.z))
    swap = np.concatenate([np.arange(d, 2 * d), np.arange(d)])
    lam1 = sites.lam1[::-1][:, swap]
    lam2 = sites.lam2[::-1][:, swap][:, :, swap]
    return _run_filter(B[::-1], S[::-1], chain.P0, lam1, lam2, sites.logz[::-1]).log_norm


def predict_states(post, chain, x):
    """Marginals q(s(x)) at arbitrary inputs; outside the grid the prior transitions extrapolate."""
    x = np.asarray(x, dtype=float).ravel()
    z, d = chain.z, chain.d
    mean = np.zeros((x.size, d))
    cov = np.zeros((x.size, d, d))

    inside = (x >= z[0]) & (x <= z[-1])
    if inside.any():
        xi = x[inside]
        seg = np.clip(np.searchsorted(z, xi, side="right") - 1, 0, chain.M - 2)
        R, T = state_conditionals(chain, seg, xi)
        mv, Sv = post.pair_means[seg], post.pair_covs[seg]
        mean[inside] = (R @ mv[..., None])[..., 0]
        cov[inside] = sym(R @ Sv @ np.swapaxes(R, -1, -2) + T)

    after = x > z[-1]
    if after.any():
        A, Q = _transition(chain.sde, x[after] - z[-1])
        mean[after] = A @ post.means[-1]
        cov[after] = sym(A @ post.covs[-1] @ np.swapaxes(A, -1, -2) + Q)

    before = x < z[0]
    if before.any():
        B, S = backward_transition(chain.sde, z[0] - x[before])
        mean[before] = B @ post.means[0]
        cov[before] = sym(B @ post.covs[0] @ np.swapaxes(B, -1, -2) + S)
    return mean, cov


def predict_f(post, chain, x):
    """Mean (Q, o) and covariance (Q, o, o) of q(f(x)) at the query inputs."""
    mean, cov = predict_states(post, chain, x)
    H = chain.H
    return mean @ H.T, sym(H @ cov @ H.T)


__all__ = [
    "TiedSite", "Sites", "Filtered", "ChainPosterior", "filter", "smooth", "posterior",
    "backward_log_normalizer", "predict_states", "predict_f", "site_from_natural_fraction",
]
