"""Acceptance criteria 1-10.

Each check records one PASS/FAIL line with the measured value, tolerance and
runtime; conftest prints them in the pytest terminal summary. Running this file
directly prints the same lines without pytest.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize

sys.path.insert(0, str(Path(__file__).parent))

from oracles import dense_gp_regression, dense_site_posterior  # noqa: E402
from test_kernels import SINGLE_OUTPUT, _scale  # noqa: E402
from test_likelihoods import H, VARIANTS, sample_input  # noqa: E402
from test_posterior import random_case  # noqa: E402
from test_spatiotemporal import dense_state_covariance  # noqa: E402

from sparsemarkov import inference as inf  # noqa: E402
from sparsemarkov.chain import InducingGrid, discretize  # noqa: E402
from sparsemarkov.data import CONJUGATE_TRUTH, generate, make_rng  # noqa: E402
from sparsemarkov.kernels import (  # noqa: E402
    IndependentStack, Matern12, Matern32, Matern52, Matern72, kernel_eval, reconstruct_covariance, to_state_space,
)
from sparsemarkov.likelihoods import BernoulliLogit, Gaussian, PoissonLog  # noqa: E402
from sparsemarkov.posterior import posterior, predict_f  # noqa: E402
from sparsemarkov.spatiotemporal import SpatialConfig, build_st_chain, make_st_problem, st_predict  # noqa: E402
from sparsemarkov.training import Layout, Model, TrainConfig, fit  # noqa: E402

RESULTS = {}


def record(number, title, ok, detail, elapsed, budget=None):
    within = budget is None or elapsed < budget
    passed = bool(ok and within)
    limit = "" if budget is None else f" / budget {budget:.0f}s"
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {title}: {detail} [{elapsed:.1f}s{limit}]"
    RESULTS[number] = line
    print(line)
    return passed


def chain_for(kernel, z):
    return discretize(to_state_space(kernel), InducingGrid(np.asarray(z, dtype=float)))


def check_dense_oracle():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        chain, sites = random_case(seed)
        post = posterior(chain, sites)
        means, covs, pm, pc, log_norm = dense_site_posterior(chain.A, chain.P0, sites.lam1, sites.lam2, sites.logz)
        worst = max(worst, np.abs(post.means - means).max(), np.abs(post.covs - covs).max(),
                    np.abs(post.pair_means - pm).max(), np.abs(post.pair_covs - pc).max(),
                    abs(post.log_norm - log_norm))
    return record(1, "dense-oracle equivalence", worst <= 1e-8, f"200 cases, worst abs error {worst:.1e} (tol 1e-8)",
                  time.perf_counter() - start, 30)


def check_conjugate_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    x = np.sort(rng.uniform(0, 10, 100))
    y = np.sin(x) + 0.3 * rng.standard_normal(100)
    noise = 0.2
    worst = dict.fromkeys(["moments", "elbo", "pep_energy", "filter_marglik"], 0.0)
    for cls in (Matern12, Matern32, Matern52, Matern72):
        kernel = cls(1.3, 0.9)
        chain = chain_for(kernel, x)
        problem = inf.make_problem(chain, Gaussian(noise), x, y)
        mean, var, lml = dense_gp_regression(lambda t: kernel_eval(kernel, t), x, y, noise, x)
        for algorithm, settings in (("cvi", {}), ("pep", {"alpha": 1.0}), ("pl", {}), ("eks", {})):
            state = inf.step(inf.initial_state(problem, algorithm, **settings), problem)
            m, c = predict_f(state.posterior, chain, x)
            worst["moments"] = max(worst["moments"], np.abs(m[:, 0] - mean).max(), np.abs(c[:, 0, 0] - var).max())
            worst["elbo"] = max(worst["elbo"], abs(inf.elbo(state, problem) - lml))
            worst["pep_energy"] = max(worst["pep_energy"], abs(inf.pep_energy(state, problem, 1.0) - lml))
            worst["filter_marglik"] = max(worst["filter_marglik"], abs(inf.filter_marglik(state, problem) - lml))
    ok = max(worst.values()) <= 1e-7
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-7)"
    return record(2, "conjugate exactness", ok, detail, time.perf_counter() - start, 10)


def check_kernel_reconstruction():
    start = time.perf_counter()
    kernels = SINGLE_OUTPUT + [IndependentStack((Matern32(2.0, 1.0), Matern12(1.0, 3.0)))]
    rng = np.random.default_rng(3)
    worst = 0.0
    for kernel in kernels:
        sde = to_state_space(kernel)
        for tau in rng.uniform(0, 5 * _scale(kernel), 50):
            worst = max(worst, np.abs(reconstruct_covariance(sde, tau) - kernel_eval(kernel, tau)).max())
    return record(3, "kernel reconstruction", worst <= 1e-9,
                  f"{len(kernels)} kernels x 50 offsets, worst abs error {worst:.1e} (tol 1e-9)",
                  time.perf_counter() - start, 5)


def _rel_error(a, b):
    return float(np.max(np.abs(np.asarray(a) - b) / np.maximum(np.abs(b), 1e-3)))


def _likelihood_errors(lik, y, mean, cov, alpha):
    """Worst relative finite-difference error over every derivative the likelihood exposes."""
    o = lik.latent_dim
    errs = []
    _, grad, hess = lik._derivs(np.array([y]), mean[None])
    _, dm, dc = lik.variational_expectation(y, mean, cov)
    _, g, hz = lik.log_partition(y, mean, cov, alpha)
    jac = lik.conditional_moments(mean)[2]
    for i in range(o):
        e = np.zeros(o)
        e[i] = H
        up, dn = lik._derivs(np.array([y]), (mean + e)[None]), lik._derivs(np.array([y]), (mean - e)[None])
        errs.append(_rel_error(grad[0, i], (up[0] - dn[0])[0] / (2 * H)))
        errs.append(_rel_error(hess[0, :, i], (up[1] - dn[1])[0] / (2 * H)))
        fd = (lik.conditional_moments(mean + e)[0] - lik.conditional_moments(mean - e)[0]) / (2 * H)
        errs.append(_rel_error(jac[..., i], fd))
        fd = lik.variational_expectation(y, mean + e, cov)[0] - lik.variational_expectation(y, mean - e, cov)[0]
        errs.append(_rel_error(dm[0, i], fd[0] / (2 * H)))
        up, dn = lik.log_partition(y, mean + e, cov, alpha), lik.log_partition(y, mean - e, cov, alpha)
        errs.append(_rel_error(g[0, i], (up[0] - dn[0])[0] / (2 * H)))
        errs.append(_rel_error(hz[0, :, i], (up[1] - dn[1])[0] / (2 * H)))
        for j in range(i, o):
            E = np.zeros((o, o))
            E[i, j] += H
            E[j, i] += H
            fd = lik.variational_expectation(y, mean, cov + E)[0] - lik.variational_expectation(y, mean, cov - E)[0]
            errs.append(_rel_error(2 * dc[0, i, j], fd[0] / (2 * H)))
    return max(errs)


def check_gradients():
    start = time.perf_counter()
    worst = {}
    for lik in VARIANTS:
        rng = np.random.default_rng(17)
        worst[lik.kind] = max(_likelihood_errors(lik, *sample_input(lik, rng)) for _ in range(100))
    ok = max(worst.values()) <= 1e-5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " worst relative error, 100 points each (tol 1e-5)"
    return record(4, "likelihood gradients", ok, detail, time.perf_counter() - start, 30)


def _smallest_elbo_change(task, seed, kernel, lik):
    data = generate(task, 500, seed)
    chain = chain_for(kernel, np.linspace(data.x[0], data.x[-1], 30))
    problem = inf.make_problem(chain, lik, data.x, data.y)
    state = inf.initial_state(problem, "cvi", rho=0.5)
    values = [inf.elbo(state, problem)]
    for _ in range(100):
        state = inf.step(state, problem)
        values.append(inf.elbo(state, problem))
    return float(np.diff(values).min())


def check_elbo_monotone():
    """Scored on seed 0 like every other criterion; seeds 1-7 are reported as a robustness sweep."""
    start = time.perf_counter()
    cases = {"bernoulli": ("binary-sign", Matern72(4.0, 0.2), BernoulliLogit()),
             "poisson": ("poisson-cox", Matern52(1.0, 10.0), PoissonLog())}
    changes = {name: [_smallest_elbo_change(task, seed, k, lik) for seed in range(8)]
               for name, (task, k, lik) in cases.items()}
    ok = min(v[0] for v in changes.values()) >= -1e-9
    sweep = []
    for name, vals in changes.items():
        bad = [f"seed {s} {v:+.1e}" for s, v in enumerate(vals) if v < -1e-9]
        sweep.append(f"{name} {8 - len(bad)}/8 seeds monotone" + (f" ({', '.join(bad)})" if bad else ""))
    detail = (", ".join(f"{k} smallest change {v[0]:+.1e}" for k, v in changes.items())
              + " over 100 steps on seed 0 (tol -1e-9); sweep: " + "; ".join(sweep))
    return record(5, "ELBO monotonicity", ok, detail, time.perf_counter() - start)


def check_small_power_limit():
    start = time.perf_counter()
    data = generate("binary-sign", 1000, 0)
    chain = chain_for(Matern72(4.0, 0.2), np.linspace(data.x[0], data.x[-1], 50))
    problem = inf.make_problem(chain, BernoulliLogit(), data.x, data.y)
    cvi = inf.run_inference(inf.initial_state(problem, "cvi"), problem, 500, tol=1e-10)
    pep = inf.run_inference(inf.initial_state(problem, "pep", alpha=0.01), problem, 1000, tol=1e-10)
    m_cvi = inf.latent_marginals(cvi.posterior, problem.design)[0]
    m_pep = inf.latent_marginals(pep.posterior, problem.design)[0]
    diff = float(np.abs(m_cvi - m_pep).max())
    detail = (f"max |E f (PEP 0.01) - E f (CVI)| {diff:.1e} (tol 1e-3) after "
              f"{cvi.iteration} CVI / {pep.iteration} PEP sweeps")
    return record(6, "small-power limit", diff <= 1e-3, detail, time.perf_counter() - start, 60)


def check_inducing_trend():
    start = time.perf_counter()
    data = generate("banana-like-2d", 1000, 0)
    model = Model(Matern52(1.0, 0.5), BernoulliLogit(), Matern52(1.0, 0.5))
    sizes = (4, 8, 16, 32)
    nlml = {"cvi": [], "pep": []}
    for M in sizes:
        layout = Layout(np.linspace(data.x.min(), data.x.max(), M),
                        np.linspace(data.r.min(), data.r.max(), M)[:, None])
        problem = model.problem(layout, data.x, data.y, data.r)
        cvi = inf.run_inference(inf.initial_state(problem, "cvi"), problem, 300, tol=1e-8)
        pep = inf.run_inference(inf.initial_state(problem, "pep", alpha=1.0), problem, 300, tol=1e-8)
        nlml["cvi"].append(-inf.elbo(cvi, problem))
        nlml["pep"].append(-inf.pep_energy(pep, problem, 1.0))
    inversions = {k: int(np.sum(np.diff(v) > 0)) for k, v in nlml.items()}
    ok = all(n <= 1 for n in inversions.values())
    detail = f"M={list(sizes)}; " + "; ".join(
        f"{k} NLML " + " ".join(f"{v:.3f}" for v in vals) + f" ({inversions[k]} increases, at most 1)"
        for k, vals in nlml.items())
    return record(7, "NLML trend in M", ok, detail, time.perf_counter() - start, 300)


def check_separability():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    kx, kr = Matern32(1.3, 0.7), Matern52(0.8, 0.5)
    cfg = SpatialConfig(kr, rng.uniform(0, 2, 4))
    zx = np.sort(rng.uniform(0, 3, 4))
    chain = build_st_chain(kx, cfg, zx)
    separable = np.kron(kernel_eval(kx, zx[:, None] - zx[None, :]), cfg.gram(cfg.z, cfg.z))
    gram_err = float(np.abs(dense_state_covariance(chain) - separable).max())

    X, R = (a.ravel() for a in np.meshgrid(zx, cfg.z[:, 0], indexing="ij"))
    y = rng.standard_normal(X.size)
    noise = 0.1
    problem = make_st_problem(chain, Gaussian(noise), X, R, y)
    K = kernel_eval(kx, X[:, None] - X[None, :]) * kernel_eval(kr, R[:, None] - R[None, :])
    A = K + noise * np.eye(X.size)
    mean = K @ np.linalg.solve(A, y)
    var = np.diag(K - K @ np.linalg.solve(A, K))
    reg_err = 0.0
    for algorithm in ("cvi", "pep", "pl", "eks"):
        state = inf.step(inf.initial_state(problem, algorithm), problem)
        m, v = st_predict(state.posterior, chain, X, R)
        reg_err = max(reg_err, np.abs(m[:, 0] - mean).max(), np.abs(v[:, 0, 0] - var).max())
    ok = gram_err <= 1e-8 and reg_err <= 1e-7
    detail = f"4x4 grid Gram error {gram_err:.1e} (tol 1e-8), conjugate regression error {reg_err:.1e} (tol 1e-7)"
    return record(8, "spatio-temporal separability", ok, detail, time.perf_counter() - start, 30)


def check_scaling():
    start = time.perf_counter()
    M, d = 500, 2
    chain = chain_for(Matern32(1.0, 5.0), np.linspace(0, 1000, M))
    rng = make_rng(0)
    sizes = (25_000, 50_000, 100_000)
    times, storage = [], []
    for N in sizes:
        x = np.sort(rng.uniform(0, 1000, N))
        y = np.sin(x / 10) + 0.1 * rng.standard_normal(N)
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            problem = inf.make_problem(chain, Gaussian(0.01), x, y)
            state = inf.step(inf.initial_state(problem, "cvi"), problem)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
        storage.append(state.sites.storage_size())
    exponent = float(np.polyfit(np.log(sizes), np.log(times), 1)[0])
    expected = (M - 1) * (2 * d + 4 * d * d + 1)
    ok = all(s == expected for s in storage) and exponent < 2.0
    detail = (f"site storage {storage} scalars (expected {expected}); setup+iteration "
              + " ".join(f"{t:.3f}s" for t in times) + f" for N={list(sizes)}; fitted exponent {exponent:.2f} (< 2)")
    return record(9, "memory and complexity", ok, detail, time.perf_counter() - start, 120)


def _dense_mle(x, y, noise):
    def nll(p):
        v, ell = np.exp(p)
        r = np.sqrt(3) * np.abs(x[:, None] - x[None, :]) / ell
        L = np.linalg.cholesky(v * (1 + r) * np.exp(-r) + noise * np.eye(x.size))
        a = np.linalg.solve(L, y)
        return 0.5 * a @ a + np.log(np.diag(L)).sum()
    return np.exp(minimize(nll, [0.0, 0.0]).x)


def check_hyperparameter_recovery():
    start = time.perf_counter()
    truth = CONJUGATE_TRUTH
    data = generate("conjugate-matern", 200, 0)
    model = Model(Matern32(1.0, 1.0), Gaussian(truth["noise"]))
    layout = Layout(data.x)
    parts, ok = [], True
    for objective, algorithm in (("elbo", "cvi"), ("pep_energy", "pep"), ("filter_marglik", "cvi")):
        cfg = TrainConfig(objective=objective, trainable=("kernel.variance", "kernel.lengthscale"))
        kernel = fit(model, layout, data.x, data.y, cfg, algorithm=algorithm).model.kernel
        ell_err = abs(kernel.lengthscale / truth["lengthscale"] - 1)
        var_err = abs(kernel.variance / truth["variance"] - 1)
        ok &= ell_err <= 0.10 and var_err <= 0.20
        parts.append(f"{objective} l={kernel.lengthscale:.3f} ({ell_err:.1%}) s2={kernel.variance:.3f} ({var_err:.1%})")
    v, ell = _dense_mle(data.x, data.y, truth["noise"])
    detail = (f"truth l={truth['lengthscale']} s2={truth['variance']}; " + "; ".join(parts)
              + f"; dense MLE l={ell:.3f} s2={v:.3f} (tol 10% / 20%)")
    return record(10, "hyperparameter recovery", ok, detail, time.perf_counter() - start, 120)


CRITERIA = [check_dense_oracle, check_conjugate_exactness, check_kernel_reconstruction, check_gradients,
            check_elbo_monotone, check_small_power_limit, check_inducing_trend, check_separability,
            check_scaling, check_hyperparameter_recovery]


@pytest.mark.parametrize("check", CRITERIA, ids=[f"criterion_{i + 1:02d}" for i in range(len(CRITERIA))])
def test_acceptance(check):
    assert check(), RESULTS[CRITERIA.index(check) + 1]


if __name__ == "__main__":
    outcomes = [check() for check in CRITERIA]
    print(f"{sum(outcomes)}/{len(outcomes)} criteria passed")
    sys.exit(0 if all(outcomes) else 1)
