"""Hyperparameter learning: alternate a site sweep with an Adam step on log-hyperparameters."""

from dataclasses import dataclass, field

import numpy as np

from .chain import InducingGrid, discretize
from .errors import SparseMarkovError, TrainingError
from .inference import OBJECTIVES, initial_state, make_problem, objective, step, with_problem
from .kernels import to_state_space
from .spatiotemporal import SpatialConfig, build_st_chain, make_st_problem


@dataclass(frozen=True)
class Layout:
    """Inducing inputs: temporal grid ``z`` and, for space-time models, spatial locations ``z_r``."""

    z: np.ndarray
    z_r: np.ndarray = None


@dataclass(frozen=True)
class Model:
    """Kernel, likelihood and optional spatial kernel, addressed by flat parameter paths.

    Paths look like ``kernel.lengthscale``, ``likelihood.variance`` or
    ``spatial.lengthscale``; composite kernels add their component index,
    e.g. ``kernel.0.variance``.
    """

    kernel: object
    likelihood: object
    spatial_kernel: object = None

    def parameters(self):
        out = {f"kernel.{k}": v for k, v in self.kernel.hyperparameters().items()}
        out.update({f"likelihood.{k}": v for k, v in self.likelihood.hyperparameters().items()})
        if self.spatial_kernel is not None:
            out.update({f"spatial.{k}": v for k, v in self.spatial_kernel.hyperparameters().items()})
        return out

    def with_parameters(self, values):
        groups = {"kernel": {}, "likelihood": {}, "spatial": {}}
        for path, v in values.items():
            head, rest = path.split(".", 1)
            if head not in groups:
                raise KeyError(f"unknown parameter path {path!r}")
            groups[head][rest] = v
        return Model(
            self.kernel.with_hyperparameters(groups["kernel"]) if groups["kernel"] else self.kernel,
            self.likelihood.with_hyperparameters(groups["likelihood"]) if groups["likelihood"] else self.likelihood,
            self.spatial_kernel.with_hyperparameters(groups["spatial"]) if groups["spatial"] else self.spatial_kernel,
        )

    def problem(self, layout, x, y, r=None):
        """Discretise the prior on ``layout`` and project the data onto it."""
        if self.spatial_kernel is None:
            chain = discretize(to_state_space(self.kernel), InducingGrid(layout.z))
            return make_problem(chain, self.likelihood, x, y)
        chain = build_st_chain(self.kernel, SpatialConfig(self.spatial_kernel, layout.z_r), layout.z)
        return make_st_problem(chain, self.likelihood, x, r, y)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    fd_epsilon: float = 1e-4
    objective: str = "elbo"
    trainable: tuple = None
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for name in ("learning_rate", "fd_epsilon", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FitResult:
    model: Model
    state: object
    problem: object
    trace: list = field(default_factory=list)


class Adam:
    """Adam ascent on a flat parameter vector."""

    def __init__(self, size, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def ascend(self, params, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return params + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _objective_alpha(state):
    return state.alpha if state.algorithm == "pep" else 1.0


def objective_gradient(model, layout, data, state, config, names, log_params):
    """Central differences of the objective in log-parameter space at fixed sites."""
    x, y, r = data
    alpha = _objective_alpha(state)
    grad = np.zeros(len(names))
    for i, name in enumerate(names):
        values = []
        for sign in (1.0, -1.0):
            shifted = log_params.copy()
            shifted[i] += sign * config.fd_epsilon
            trial = model.with_parameters(dict(zip(names, np.exp(shifted))))
            problem = trial.problem(layout, x, y, r)
            values.append(objective(config.objective, with_problem(state, problem), problem, alpha))
        grad[i] = (values[0] - values[1]) / (2 * config.fd_epsilon)
    return grad


def fit(model, layout, x, y, config, r=None, algorithm="cvi", **settings):
    """Alternate one site sweep and one Adam step for ``config.iterations`` iterations.

    Returns the trained model, final inference state, its problem and a trace of
    dicts with keys ``iteration``, ``objective``, ``skips`` and every parameter path.
    """
    data = (x, y, r)
    problem = model.problem(layout, x, y, r)
    state = initial_state(problem, algorithm, **settings)
    names = list(config.trainable) if config.trainable is not None else list(model.parameters())
    unknown = set(names) - set(model.parameters())
    if unknown:
        raise KeyError(f"unknown trainable parameters {sorted(unknown)}")
    log_params = np.log(np.array([model.parameters()[n] for n in names], dtype=float))
    opt = Adam(len(names), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    trace = []
    for it in range(config.iterations):
        try:
            state = step(state, problem)
            value = objective(config.objective, state, problem, _objective_alpha(state))
            if not np.isfinite(value):
                raise FloatingPointError("objective is not finite")
            if names:
                grad = objective_gradient(model, layout, data, state, config, names, log_params)
                if not np.all(np.isfinite(grad)):
                    raise FloatingPointError("objective gradient is not finite")
                log_params = opt.ascend(log_params, grad)
                with np.errstate(over="ignore"):
                    values = np.exp(log_params)
                if not np.all(np.isfinite(values) & (values > 0)):
                    raise FloatingPointError("hyperparameters left the representable range")
                model = model.with_parameters(dict(zip(names, values)))
                problem = model.problem(layout, x, y, r)
                state = with_problem(state, problem)
        except (SparseMarkovError, FloatingPointError, np.linalg.LinAlgError) as exc:
            if isinstance(exc, TrainingError):
                raise
            raise TrainingError(it, exc) from exc
        row = {"iteration": it, "objective": value, "skips": state.skips}
        row.update(model.parameters())
        trace.append(row)
    return FitResult(model, state, problem, trace)


def evaluate_objective(result, config):
    return objective(config.objective, result.state, result.problem, _objective_alpha(result.state))


__all__ = ["Layout", "Model", "TrainConfig", "FitResult", "Adam", "fit", "objective_gradient"]
