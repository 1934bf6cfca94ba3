"""Separable space-time priors as a temporal chain over spatial inducing locations.

For kappa(x, r; x', r') = kappa_x(x - x') kappa_r(r - r') the latent values at
M_z spatial inducing points form an SDE with state dimension M_z * d whose
matrices are Kronecker products of the spatial Gram and the temporal SDE.
State ordering is spatial-major: block i holds the temporal state at z_r[i].
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .chain import (
    FunctionConditional, InducingGrid, MarkovChain, _check_segment, assign_segments, discretize,
    forward_predictions, state_conditionals,
)
from .errors import CoverageError, ParameterDomainError
from .inference import Design, Problem, left_fractions
from .kernels import LtiSde, kernel_eval, to_state_space
from .linalg import JITTER_START, JITTER_STOP, sym


def _distances(a, b):
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


@dataclass(frozen=True)
class SpatialConfig:
    """Spatial kernel (stationary, Euclidean distance) and inducing locations of shape (M_z, p)."""

    kernel: object
    z: np.ndarray
    jitter: float = JITTER_START

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if not np.all(np.isfinite(z)):
            raise ParameterDomainError("spatial inducing locations must be finite")
        dist = _distances(z, z)
        if np.any(dist[np.triu_indices(len(z), 1)] == 0):
            raise ParameterDomainError("spatial inducing locations must be pairwise distinct")
        object.__setattr__(self, "z", z)

    @property
    def M(self):
        return self.z.shape[0]

    def gram(self, a, b):
        return kernel_eval(self.kernel, _distances(np.atleast_2d(a), np.atleast_2d(b)))

    @cached_property
    def K(self):
        """Gram matrix of the inducing locations, with the jitter that made it factorisable."""
        return self._factor[0]

    @cached_property
    def chol(self):
        return self._factor[1]

    @cached_property
    def _factor(self):
        K = self.gram(self.z, self.z)
        scale = np.abs(np.diag(K)).mean()
        jitter = self.jitter
        while jitter <= JITTER_STOP * (1 + 1e-9):
            Kj = K + jitter * scale * np.eye(self.M)
            try:
                return Kj, np.linalg.cholesky(Kj)
            except np.linalg.LinAlgError:
                jitter *= 10.0
        raise ParameterDomainError("spatial Gram matrix is not positive definite within jitter tolerance")

    def prior_variance(self):
        return float(kernel_eval(self.kernel, 0.0))


def spatial_weights(cfg, r):
    """Interpolation weights b(r) = K_rz K_zz^-1 (Q, M_z) and residual variances C(r) (Q,)."""
    r = np.asarray(r, dtype=float)
    if r.ndim == 1:
        r = r[:, None] if cfg.z.shape[1] == 1 else r[None, :]
    Krz = cfg.gram(r, cfg.z)
    half = solve_triangular(cfg.chol, Krz.T, lower=True)
    b = cho_solve((cfg.chol, True), Krz.T).T
    C = np.maximum(cfg.prior_variance() - (half ** 2).sum(0), 0.0)
    return b, C


def spatial_conditional(cfg, r_query, H):
    """B(r) = b(r) kron H of shape (o, M_z d) and C(r) for a single query location."""
    b, C = spatial_weights(cfg, np.atleast_1d(np.asarray(r_query, dtype=float))[None, :]
                           if cfg.z.shape[1] > 1 else np.atleast_1d(r_query))
    return np.kron(b[0], H), float(C[0])


@dataclass(frozen=True)
class SpatioTemporalChain(MarkovChain):
    """Joint chain over all spatial inducing locations, plus its temporal and spatial parts."""

    temporal: MarkovChain = None
    spatial: SpatialConfig = None


def _kron_batch(a, B):
    """Per-slice Kronecker product of (..., m, n) with (..., p, q)."""
    out = a[..., :, None, :, None] * B[..., None, :, None, :]
    s = out.shape
    return out.reshape(s[:-4] + (s[-4] * s[-3], s[-2] * s[-1]))


def build_st_chain(kernel_x, cfg, z_x):
    """Chain with A_m = I kron A_m^x, Q_m = K kron Q_m^x and P0 = K kron P0^x."""
    temporal = discretize(to_state_space(kernel_x), InducingGrid(np.asarray(z_x, dtype=float)))
    sx = temporal.sde
    K = cfg.K
    eye = np.eye(cfg.M)
    sde = LtiSde(np.kron(eye, sx.F), np.kron(eye, sx.L), np.kron(eye, sx.H), np.kron(K, sx.Qc),
                 sym(np.kron(K, sx.P0)))
    eyes = np.broadcast_to(eye, (temporal.M - 1,) + eye.shape)
    Ks = np.broadcast_to(K, eyes.shape)
    A = _kron_batch(eyes, temporal.A)
    Q = sym(_kron_batch(Ks, temporal.Q))
    Q_inv = sym(_kron_batch(np.broadcast_to(np.linalg.inv(K), eyes.shape), temporal.Q_inv))
    return SpatioTemporalChain(sde, temporal.grid, A, Q, Q_inv, temporal=temporal, spatial=cfg)


def _row_kron(b, G):
    """Rows b_n kron G_n for b (N, M_z) and G (N, o, k): result (N, o, M_z k)."""
    out = b[:, None, :, None] * G[:, :, None, :]
    return out.reshape(G.shape[0], G.shape[1], -1)


def _effective(chain, seg, x, r):
    """W_eff, nu_eff and the left-state projection for batched (x, r) queries."""
    tch, cfg = chain.temporal, chain.spatial
    H = tch.H
    d = tch.d
    R, T = state_conditionals(tch, seg, x)
    b, C = spatial_weights(cfg, r)
    bKb = np.einsum("ni,ij,nj->n", b, cfg.K, b)
    # residual spatial variance scales with the temporal prior covariance of f
    resid = C[:, None, None] * (H @ tch.P0 @ H.T)
    W = np.concatenate([_row_kron(b, H @ R[..., :d]), _row_kron(b, H @ R[..., d:])], axis=-1)
    nu = sym(bKb[:, None, None] * (H @ T @ H.T) + resid)
    A, Q = forward_predictions(tch, seg, x)
    fwd = _row_kron(b, H @ A)
    fwd_noise = sym(bKb[:, None, None] * (H @ Q @ H.T) + resid)
    return W, nu, fwd, fwd_noise


def st_function_conditional(chain, m, x, r):
    """f(x, r) | v_m ~ N(W_eff v_m, nu_eff) for a single query in segment ``m``."""
    _check_segment(chain, m, x)
    W, nu, _, _ = _effective(chain, np.array([m]), np.array([float(x)]), np.atleast_2d(r))
    return FunctionConditional(W[0], nu[0])


def st_design(chain, x, r, y):
    """Design for space-time inputs; the spatial locations ``r`` have shape (N, p)."""
    x = np.asarray(x, dtype=float).ravel()
    r = np.asarray(r, dtype=float).reshape(x.size, -1)
    perm = np.argsort(x, kind="stable")
    xs, rs = x[perm], r[perm]
    seg, counts = assign_segments(xs, chain.grid)
    W, nu, fwd, fwd_noise = _effective(chain, seg, xs, rs)
    return Design(y=np.asarray(y, dtype=float).ravel()[perm], seg=seg, W=W, nu=nu, fwd=fwd,
                  fwd_noise=fwd_noise, counts=counts, left_frac=left_fractions(xs, seg, counts), perm=perm)


def make_st_problem(chain, likelihood, x, r, y):
    likelihood.validate(y)
    return Problem(chain, likelihood, st_design(chain, x, r, y))


def st_predict(post, chain, x, r):
    """Mean (Q, 1) and variance (Q, 1, 1) of q(f(x, r)); inputs must lie on the temporal grid span."""
    x = np.asarray(x, dtype=float).ravel()
    r = np.asarray(r, dtype=float).reshape(x.size, -1)
    z = chain.z
    if x.size and (x.min() < z[0] or x.max() > z[-1]):
        raise CoverageError("space-time predictions are limited to the temporal inducing span")
    seg = np.clip(np.searchsorted(z, x, side="right") - 1, 0, chain.M - 2)
    W, nu, _, _ = _effective(chain, seg, x, r)
    mean = np.einsum("nok,nk->no", W, post.pair_means[seg])
    cov = np.empty((x.size,) + nu.shape[1:])
    for m in np.unique(seg):
        idx = seg == m
        cov[idx] = W[idx] @ post.pair_covs[m] @ np.swapaxes(W[idx], 1, 2)
    return mean, sym(cov) + nu
