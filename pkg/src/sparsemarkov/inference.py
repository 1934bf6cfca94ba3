"""Site updates (CVI, PEP, PL, EKS) and the training objectives built on them.

Every datum n enters through its local conditional f_n | v_m ~ N(W_n v_m, nu_n)
onto the inducing pair of its segment m. The :class:`Design` stores these
projections once per chain so all algorithms share the same data layout.
"""

from dataclasses import dataclass, replace

import numpy as np

from .chain import assign_segments, forward_predictions, state_conditionals
from .errors import StalePosteriorError
from .likelihoods import Gaussian
from .linalg import pd_mask, sym, times_site
from .posterior import Sites, posterior, predict_f

# Above this many scalars per gathered (N, k, k) stack, work segment by segment.
_GATHER_LIMIT = 4_000_000

ALGORITHMS = ("cvi", "pep", "pl", "eks")
OBJECTIVES = ("elbo", "pep_energy", "filter_marglik")


@dataclass(frozen=True, eq=False)
class Design:
    """Per-datum projections onto the inducing chain, with data sorted by input.

    Attributes
    ----------
    y : (N,) observations in sorted order
    seg : (N,) 0-based segment index, non-decreasing
    W, nu : (N, o, 2D), (N, o, o) conditional of f_n given the segment pair
    fwd, fwd_noise : (N, o, D), (N, o, o) conditional of f_n given the left state only
    counts : (M-1,) data per segment
    left_frac : (N,) fraction of the segment's data strictly left of x_n
    perm : (N,) sorted position -> original index
    """

    y: np.ndarray
    seg: np.ndarray
    W: np.ndarray
    nu: np.ndarray
    fwd: np.ndarray
    fwd_noise: np.ndarray
    counts: np.ndarray
    left_frac: np.ndarray
    perm: np.ndarray

    @property
    def N(self):
        return self.y.size

    @property
    def num_segments(self):
        return self.counts.size

    @property
    def starts(self):
        return np.concatenate([[0], np.cumsum(self.counts)])

    def segments(self):
        """(m, slice) for every non-empty segment."""
        s = self.starts
        for m in np.flatnonzero(self.counts):
            yield m, slice(s[m], s[m + 1])


def sort_inputs(x):
    x = np.asarray(x, dtype=float).ravel()
    perm = np.argsort(x, kind="stable")
    return perm, x[perm]


def left_fractions(xs, seg, counts):
    """Strictly-left share within the segment for sorted inputs ``xs``."""
    starts = np.concatenate([[0], np.cumsum(counts)])
    left = np.searchsorted(xs, xs, side="left") - starts[seg]
    return left / counts[seg]


def temporal_design(chain, x, y):
    """Design for one-dimensional inputs ``x`` with observations ``y``."""
    perm, xs = sort_inputs(x)
    seg, counts = assign_segments(xs, chain.grid)
    R, T = state_conditionals(chain, seg, xs)
    H = chain.H
    A, Q = forward_predictions(chain, seg, xs)
    return Design(
        y=np.asarray(y, dtype=float).ravel()[perm], seg=seg, W=H @ R, nu=sym(H @ T @ H.T),
        fwd=H @ A, fwd_noise=sym(H @ Q @ H.T), counts=counts,
        left_frac=left_fractions(xs, seg, counts), perm=perm,
    )


@dataclass(frozen=True, eq=False)
class Problem:
    """A chain, an observation model and the data projected onto the chain."""

    chain: object
    likelihood: object
    design: Design


def make_problem(chain, likelihood, x, y):
    likelihood.validate(y)
    return Problem(chain, likelihood, temporal_design(chain, x, y))


# ---------------------------------------------------------------------------
# Segment-wise linear algebra


def _gathered(design, k):
    return design.N * k * k <= _GATHER_LIMIT


def _sandwich(design, mats):
    """W_n mats[seg_n] W_n' for every datum, shape (N, o, o)."""
    W = design.W
    if _gathered(design, W.shape[-1]):
        return sym(W @ mats[design.seg] @ np.swapaxes(W, 1, 2))
    out = np.zeros((design.N, W.shape[1], W.shape[1]))
    for m, sl in design.segments():
        out[sl] = W[sl] @ mats[m] @ np.swapaxes(W[sl], 1, 2)
    return sym(out)


def _apply(design, vecs):
    """W_n vecs[seg_n], shape (N, o)."""
    return np.einsum("nok,nk->no", design.W, vecs[design.seg])


def _segment_sum(design, values):
    """Sum per-datum rows into their segments; empty segments get zeros."""
    out = np.zeros((design.num_segments,) + values.shape[1:])
    nonempty = design.counts > 0
    if design.N:
        out[nonempty] = np.add.reduceat(values, design.starts[:-1][nonempty], axis=0)
    return out


def _pull_vec(design, v):
    """Segment sums of W_n' v_n, shape (M-1, 2D)."""
    return _segment_sum(design, np.einsum("nok,no->nk", design.W, v))


def _pull_mat(design, K):
    """Segment sums of W_n' K_n W_n, shape (M-1, 2D, 2D)."""
    W = design.W
    k = W.shape[-1]
    if _gathered(design, k):
        return sym(_segment_sum(design, np.swapaxes(W, 1, 2) @ K @ W))
    out = np.zeros((design.num_segments, k, k))
    for m, sl in design.segments():
        Wm = W[sl]
        out[m] = Wm.reshape(-1, k).T @ (K[sl] @ Wm).reshape(-1, k)
    return sym(out)


def latent_marginals(post, design):
    """Mean (N, o) and covariance (N, o, o) of q(f_n) = N(W mu_v, W Sigma_v W' + nu)."""
    return _apply(design, post.pair_means), _sandwich(design, post.pair_covs) + design.nu


# ---------------------------------------------------------------------------
# State


@dataclass(frozen=True)
class InferenceState:
    """Current sites, their posterior and the algorithm settings.

    ``damping`` of ``None`` selects the default for the likelihood: undamped
    for CVI, PL and EKS and for PEP on a Gaussian likelihood, 0.5 for PEP otherwise.
    """

    sites: Sites
    posterior: object
    algorithm: str = "cvi"
    rho: float = 1.0
    alpha: float = 1.0
    damping: float = None
    parallel: bool = True
    iteration: int = 0
    skips: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        for name in ("rho", "alpha"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if self.damping is not None and not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")


def initial_state(problem, algorithm="cvi", **settings):
    """Zero sites, i.e. the posterior equals the prior."""
    sites = Sites.zeros(problem.chain.M - 1, problem.chain.d)
    return InferenceState(sites, posterior(problem.chain, sites), algorithm, **settings)


def _require_current(state):
    if state.posterior.sites is not state.sites:
        raise StalePosteriorError("posterior was not computed from the current sites")


def effective_damping(state, likelihood):
    if state.damping is not None:
        return state.damping
    if state.algorithm == "pep" and not isinstance(likelihood, Gaussian):
        return 0.5
    return 1.0


# ---------------------------------------------------------------------------
# CVI


def cvi_update(state, problem, rho=None):
    """Natural-gradient step: mix the sites with the gradients of the variational expectations."""
    _require_current(state)
    rho = state.rho if rho is None else rho
    if rho == 0:
        return state.sites, 0
    design = problem.design
    mean, cov = latent_marginals(state.posterior, design)
    _, dmean, dcov = problem.likelihood.variational_expectation(design.y, mean, cov)
    lam2 = -2.0 * _pull_mat(design, dcov)
    lam1 = _pull_vec(design, dmean - 2.0 * (dcov @ mean[..., None])[..., 0])
    target = Sites(lam1, lam2, np.zeros(design.num_segments))
    return state.sites.mix(target, rho), 0


# ---------------------------------------------------------------------------
# PEP


def _cavities(post, sites, fractions, segs):
    """Cavity q(v_m) / t_m^k for the given segments; returns mean, cov and a PD mask."""
    S = post.pair_covs[segs]
    mu = post.pair_means[segs]
    k = fractions[:, None, None]
    G = np.eye(S.shape[-1]) - k * S @ sites.lam2[segs]
    cov = sym(np.linalg.solve(G, S))
    rhs = mu - (k * S @ sites.lam1[segs][..., None])[..., 0]
    mean = np.linalg.solve(G, rhs[..., None])[..., 0]
    ok = pd_mask(cov) & np.all(np.isfinite(cov), axis=(-1, -2))
    return mean, cov, ok


@dataclass(frozen=True)
class _Fractions:
    """Per-datum fractional site contributions in latent space.

    The fraction over v is exp(logz) exp((W v)'a + (W v)' K (W v) / 2).
    """

    a: np.ndarray
    K: np.ndarray
    logz: np.ndarray
    log_tilted: np.ndarray
    valid: np.ndarray


def _pep_fractions(post, sites, problem, alpha, rows):
    """Moment-matched site fractions for the data in ``rows`` (sorted positions)."""
    design = problem.design
    seg = design.seg[rows]
    useg, inverse = np.unique(seg, return_inverse=True)
    cav_mean, cav_cov, ok = _cavities(post, sites, alpha / design.counts[useg], useg)
    W = design.W[rows]
    fm = np.einsum("nok,nk->no", W, cav_mean[inverse])
    S = sym(W @ cav_cov[inverse] @ np.swapaxes(W, 1, 2))
    valid = ok[inverse]

    o = W.shape[1]
    n = len(rows)
    a = np.zeros((n, o))
    K = np.zeros((n, o, o))
    logz = np.zeros(n)
    log_tilted = np.zeros(n)
    if valid.any():
        v = valid
        lz, g, hess = problem.likelihood.log_partition(design.y[rows][v], fm[v], S[v] + design.nu[rows][v], alpha)
        Kv = sym(np.linalg.solve(np.eye(o) + hess @ S[v], hess))
        av = g - (Kv @ (fm[v] + (S[v] @ g[..., None])[..., 0])[..., None])[..., 0]
        _, _, log_int = times_site(fm[v], S[v], av, -Kv)
        good = np.isfinite(lz) & np.isfinite(log_int) & np.all(np.isfinite(Kv), axis=(1, 2))
        idx = np.flatnonzero(v)
        valid[idx[~good]] = False
        keep = idx[good]
        a[keep], K[keep] = av[good], Kv[good]
        logz[keep] = lz[good] - log_int[good]
        log_tilted[keep] = lz[good]
    return _Fractions(a, K, logz, log_tilted, valid)


def _tied_target(sites, design, rows, frac, alpha):
    """Tied-site target lambda_old + sum_valid (frac_n / alpha - lambda_old / N_m)."""
    sub = _SubDesign(design, rows)
    lam1 = _pull_vec(sub, frac.a * frac.valid[:, None]) / alpha
    lam2 = -_pull_mat(sub, frac.K * frac.valid[:, None, None]) / alpha
    logz = _segment_sum(sub, frac.logz * frac.valid) / alpha
    share = np.zeros(design.num_segments)
    np.add.at(share, design.seg[rows][frac.valid], 1.0)
    share = share / np.maximum(design.counts, 1)
    return Sites(sites.lam1 * (1 - share[:, None]) + lam1,
                 sites.lam2 * (1 - share[:, None, None]) + lam2,
                 sites.logz * (1 - share) + logz)


class _SubDesign:
    """Row subset of a design that keeps the segment bookkeeping consistent."""

    def __init__(self, design, rows):
        rows = np.asarray(rows)
        self.W = design.W[rows]
        self.seg = design.seg[rows]
        self.N = rows.size
        self.counts = np.bincount(self.seg, minlength=design.num_segments)
        self.num_segments = design.num_segments
        self.starts = np.concatenate([[0], np.cumsum(self.counts)])

    def segments(self):
        for m in np.flatnonzero(self.counts):
            yield m, slice(self.starts[m], self.starts[m + 1])


def pep_update(state, problem, alpha=None, parallel=None, damping=None):
    """Power-EP sweep with per-segment tied fractional sites.

    Returns the new sites and the number of data whose cavity was not positive
    definite and were therefore skipped.
    """
    _require_current(state)
    alpha = state.alpha if alpha is None else alpha
    parallel = state.parallel if parallel is None else parallel
    delta = effective_damping(state, problem.likelihood) if damping is None else damping
    design, chain = problem.design, problem.chain
    if parallel:
        rows = np.arange(design.N)
        frac = _pep_fractions(state.posterior, state.sites, problem, alpha, rows)
        target = _tied_target(state.sites, design, rows, frac, alpha)
        return state.sites.mix(target, delta), int((~frac.valid).sum())

    sites, post, skips = state.sites, state.posterior, 0
    for n in range(design.N):
        rows = np.array([n])
        frac = _pep_fractions(post, sites, problem, alpha, rows)
        if not frac.valid[0]:
            skips += 1
            continue
        sites = sites.mix(_tied_target(sites, design, rows, frac, alpha), delta)
        post = posterior(chain, sites)
    return sites, skips


# ---------------------------------------------------------------------------
# Posterior linearisation and the extended Kalman smoother


def _linearised_sites(state, problem, omega, jac, resid_var, mean, damping):
    """Sites from the linear model y = omega + jac (f - mean) + e, e ~ N(0, resid_var)."""
    design = problem.design
    valid = np.isfinite(resid_var) & (resid_var > 0) & np.all(np.isfinite(jac), axis=1)
    prec = np.where(valid, 1.0 / np.where(valid, resid_var, 1.0), 0.0)
    K = prec[:, None, None] * jac[:, :, None] * jac[:, None, :]
    r = np.where(valid, design.y - omega, 0.0)
    lam2 = _pull_mat(design, K)
    lam1 = _pull_vec(design, (K @ mean[..., None])[..., 0] + jac * (prec * r)[:, None])
    invalid = np.bincount(design.seg[~valid], minlength=design.num_segments)
    keep = invalid / np.maximum(design.counts, 1)
    sites = state.sites
    target = Sites(lam1 + keep[:, None] * sites.lam1, lam2 + keep[:, None, None] * sites.lam2,
                   keep * sites.logz)
    return sites.mix(target, damping), int((~valid).sum())


def pl_update(state, problem, damping=None):
    """Posterior linearisation: statistical linear regression of E[y|f] under q(f_n)."""
    _require_current(state)
    delta = effective_damping(state, problem.likelihood) if damping is None else damping
    mean, cov = latent_marginals(state.posterior, problem.design)
    omega, B, C = problem.likelihood.slr_moments(mean, cov)
    jac = np.linalg.solve(cov, C[..., None])[..., 0]
    resid = B - np.einsum("ni,ni->n", jac, C)
    return _linearised_sites(state, problem, omega, jac, resid, mean, delta)


def eks_update(state, problem, damping=None):
    """Extended Kalman smoother: first-order expansion of E[y|f] at the posterior mean."""
    _require_current(state)
    delta = effective_damping(state, problem.likelihood) if damping is None else damping
    mean, _ = latent_marginals(state.posterior, problem.design)
    omega, var, jac = problem.likelihood.conditional_moments(mean)
    return _linearised_sites(state, problem, omega, jac, var, mean, delta)


# ---------------------------------------------------------------------------
# Driving the updates


def refresh(state, problem, sites, skips=0):
    """New state holding ``sites`` and their freshly computed posterior."""
    return replace(state, sites=sites, posterior=posterior(problem.chain, sites),
                   iteration=state.iteration + 1, skips=skips)


def step(state, problem):
    """One sweep of the state's algorithm followed by a posterior refresh."""
    if state.algorithm == "cvi":
        sites, skips = cvi_update(state, problem)
    elif state.algorithm == "pep":
        sites, skips = pep_update(state, problem)
    elif state.algorithm == "pl":
        sites, skips = pl_update(state, problem)
    else:
        sites, skips = eks_update(state, problem)
    return refresh(state, problem, sites, skips)


def run_inference(state, problem, iterations=100, tol=None):
    """Repeat sweeps; stop early once the site change falls below ``tol``."""
    for _ in range(iterations):
        new = step(state, problem)
        change = new.sites.max_change(state.sites)
        state = new
        if tol is not None and change <= tol:
            break
    return state


def with_problem(state, problem):
    """Keep the sites but recompute the posterior under a new problem (e.g. new hyperparameters)."""
    return replace(state, posterior=posterior(problem.chain, state.sites))


# ---------------------------------------------------------------------------
# Objectives


def expected_log_sites(post, sites):
    """E_q(v_m)[log t_m(v_m)] per segment."""
    mu, S = post.pair_means, post.pair_covs
    lam1, lam2 = sites.lam1, sites.lam2
    quad = np.einsum("mij,mji->m", lam2, S) + np.einsum("mi,mij,mj->m", mu, lam2, mu)
    return sites.logz + np.einsum("mi,mi->m", mu, lam1) - 0.5 * quad


def elbo(state, problem):
    """Evidence lower bound: expected log likelihood minus KL from the site form."""
    _require_current(state)
    post = state.posterior
    mean, cov = latent_marginals(post, problem.design)
    ve = problem.likelihood.variational_expectation(problem.design.y, mean, cov)[0]
    return float(ve.sum() + post.log_norm - expected_log_sites(post, state.sites).sum())


def pep_energy(state, problem, alpha=None):
    """Power-EP approximation to the log marginal likelihood.

    Sum over data of (1/alpha) [log tilted normaliser - log cavity expectation of
    the moment-matched fraction] plus the log partition of the prior times the
    sites' exponential parts. Data with a non-PD cavity are left out.
    """
    _require_current(state)
    alpha = state.alpha if alpha is None else alpha
    rows = np.arange(problem.design.N)
    frac = _pep_fractions(state.posterior, state.sites, problem, alpha, rows)
    local = frac.logz[frac.valid].sum() / alpha
    return float(local + state.posterior.log_norm - state.sites.logz.sum())


def _left_marginal(lam1, lam2, d):
    """Natural parameters on u_m after integrating u_{m+1} out of a site."""
    J11, J12, J22 = lam2[..., :d, :d], lam2[..., :d, d:], lam2[..., d:, d:]
    pinv = np.linalg.pinv(J22, hermitian=True)
    J = sym(J11 - J12 @ pinv @ np.swapaxes(J12, -1, -2))
    h = lam1[..., :d] - (J12 @ pinv @ lam1[..., d:, None])[..., 0]
    return h, J


def filter_marglik(state, problem):
    """Sum of approximate one-step predictive log densities from the forward filter."""
    _require_current(state)
    design, chain = problem.design, problem.chain
    filt = state.posterior.filtered
    d = chain.d
    h, J = _left_marginal(state.sites.lam1, state.sites.lam2, d)
    seg, k = design.seg, design.left_frac
    mu, P = filt.means[seg], filt.covs[seg]
    hit = k > 0
    if hit.any():
        mu_k, P_k, _ = times_site(mu[hit], P[hit], k[hit, None] * h[seg[hit]], k[hit, None, None] * J[seg[hit]])
        mu, P = mu.copy(), P.copy()
        mu[hit], P[hit] = mu_k, P_k
    proj = design.fwd
    mean = (proj @ mu[..., None])[..., 0]
    cov = sym(proj @ P @ np.swapaxes(proj, 1, 2)) + design.fwd_noise
    return float(problem.likelihood.log_partition(design.y, mean, cov, 1.0)[0].sum())


def objective(name, state, problem, alpha=1.0):
    """Evaluate a training objective by name."""
    if name == "elbo":
        return elbo(state, problem)
    if name == "pep_energy":
        return pep_energy(state, problem, alpha)
    if name == "filter_marglik":
        return filter_marglik(state, problem)
    raise ValueError(f"unknown objective {name!r}")


def predict(state, problem, x):
    """Mean and covariance of q(f) at new one-dimensional inputs."""
    return predict_f(state.posterior, problem.chain, x)
