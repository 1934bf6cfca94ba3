"""Stationary kernels and their linear time-invariant SDE representations."""

from dataclasses import dataclass, field, fields, replace
from math import comb, gamma, pi, sqrt

import numpy as np
from scipy.linalg import block_diag, solve_continuous_lyapunov

from .errors import ParameterDomainError, StabilityError
from .linalg import expm, sym


@dataclass(frozen=True)
class LtiSde:
    """State-space model ds = F s dx + L dw, f = H s, with stationary covariance P0."""

    F: np.ndarray
    L: np.ndarray
    H: np.ndarray
    Qc: np.ndarray
    P0: np.ndarray

    @property
    def d(self):
        return self.F.shape[0]

    @property
    def e(self):
        return self.L.shape[1]

    @property
    def o(self):
        return self.H.shape[0]

    def lyapunov_residual(self):
        """Infinity norm of F P0 + P0 F' + L Qc L'."""
        res = self.F @ self.P0 + self.P0 @ self.F.T + self.L @ self.Qc @ self.L.T
        return np.abs(res).sum(axis=1).max()

    def jittered_P0(self):
        """P0 with the standard relative jitter added, ready for Cholesky."""
        return self.P0 + 1e-10 * np.trace(self.P0) / self.d * np.eye(self.d)


def _positive(name, value):
    if not np.isfinite(value) or value <= 0:
        raise ParameterDomainError(f"{name} must be positive, got {value}")


class Kernel:
    """Common interface of every kernel."""

    kind = ""

    @property
    def num_outputs(self):
        return 1

    def hyperparameters(self):
        """Flat mapping from parameter path to value."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_hyperparameters(self, values):
        """Copy with the given flat parameter paths replaced."""
        return replace(self, **{k: float(v) for k, v in values.items()})

    def to_dict(self):
        out = {"type": self.kind}
        out.update({k: float(v) for k, v in self.hyperparameters().items()})
        return out


@dataclass(frozen=True)
class _Matern(Kernel):
    variance: float = 1.0
    lengthscale: float = 1.0

    order = 0

    def __post_init__(self):
        _positive("variance", self.variance)
        _positive("lengthscale", self.lengthscale)

    @property
    def nu(self):
        return self.order + 0.5

    @property
    def rate(self):
        return sqrt(2 * self.nu) / self.lengthscale

    def _sde(self):
        d = self.order + 1
        lam = self.rate
        F = np.diag(np.ones(d - 1), 1)
        F[-1, :] = [-comb(d, i) * lam ** (d - i) for i in range(d)]
        L = np.zeros((d, 1))
        L[-1, 0] = 1.0
        H = np.zeros((1, d))
        H[0, 0] = 1.0
        q = 2 * self.variance * sqrt(pi) * lam ** (2 * self.nu) * gamma(self.nu + 0.5) / gamma(self.nu)
        Qc = np.array([[q]])
        return LtiSde(F, L, H, Qc, solve_stationary(F, L, Qc))

    def _eval(self, tau):
        r = self.rate * np.abs(tau)
        poly = {
            0: lambda r: np.ones_like(r),
            1: lambda r: 1 + r,
            2: lambda r: 1 + r + r ** 2 / 3,
            3: lambda r: 1 + r + 2 * r ** 2 / 5 + r ** 3 / 15,
        }[self.order]
        return self.variance * poly(r) * np.exp(-r)


@dataclass(frozen=True)
class Matern12(_Matern):
    kind = "matern12"
    order = 0


@dataclass(frozen=True)
class Matern32(_Matern):
    kind = "matern32"
    order = 1


@dataclass(frozen=True)
class Matern52(_Matern):
    kind = "matern52"
    order = 2


@dataclass(frozen=True)
class Matern72(_Matern):
    kind = "matern72"
    order = 3


@dataclass(frozen=True)
class Cosine(Kernel):
    """sigma^2 cos(omega tau); a noise-free rotation of a two-dimensional state."""

    variance: float = 1.0
    frequency: float = 1.0

    kind = "cosine"

    def __post_init__(self):
        _positive("variance", self.variance)
        if not np.isfinite(self.frequency) or self.frequency < 0:
            raise ParameterDomainError(f"frequency must be non-negative, got {self.frequency}")

    def _sde(self):
        w = self.frequency
        F = np.array([[0.0, -w], [w, 0.0]])
        # No driving noise: the stationary covariance is set directly since the
        # rotation is only marginally stable and a Lyapunov solve is singular.
        return LtiSde(F, np.zeros((2, 1)), np.array([[1.0, 0.0]]), np.zeros((1, 1)),
                      self.variance * np.eye(2))

    def _eval(self, tau):
        return self.variance * np.cos(self.frequency * np.asarray(tau, dtype=float))


@dataclass(frozen=True)
class QuasiPeriodic(Kernel):
    """Cosine(variance, frequency) times Matern12(1, lengthscale)."""

    variance: float = 1.0
    lengthscale: float = 1.0
    frequency: float = 1.0

    kind = "quasiperiodic"

    def __post_init__(self):
        _positive("variance", self.variance)
        _positive("lengthscale", self.lengthscale)
        if not np.isfinite(self.frequency) or self.frequency < 0:
            raise ParameterDomainError(f"frequency must be non-negative, got {self.frequency}")

    def _sde(self):
        per = Cosine(self.variance, self.frequency)._sde()
        dec = Matern12(1.0, self.lengthscale)._sde()
        ip, id_ = np.eye(per.d), np.eye(dec.d)
        F = np.kron(per.F, id_) + np.kron(ip, dec.F)
        L = np.kron(ip, dec.L)
        Qc = np.kron(per.P0, dec.Qc)
        H = np.kron(per.H, dec.H)
        P0 = np.kron(per.P0, dec.P0)
        _check_stable(F)
        return LtiSde(F, L, H, Qc, P0)

    def _eval(self, tau):
        tau = np.asarray(tau, dtype=float)
        return self.variance * np.cos(self.frequency * tau) * np.exp(-np.abs(tau) / self.lengthscale)


@dataclass(frozen=True)
class _Composite(Kernel):
    parts: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise ParameterDomainError(f"{self.kind} needs at least one component")
        for p in self.parts:
            if p.num_outputs != 1:
                raise ParameterDomainError("components must be single-output kernels")

    def hyperparameters(self):
        out = {}
        for i, p in enumerate(self.parts):
            for k, v in p.hyperparameters().items():
                out[f"{i}.{k}"] = v
        return out

    def with_hyperparameters(self, values):
        grouped = [{} for _ in self.parts]
        for key, v in values.items():
            i, rest = key.split(".", 1)
            grouped[int(i)][rest] = v
        return replace(self, parts=tuple(p.with_hyperparameters(g) for p, g in zip(self.parts, grouped)))

    def to_dict(self):
        return {"type": self.kind, "parts": [p.to_dict() for p in self.parts]}

    def _blocks(self):
        sdes = [p._sde() for p in self.parts]
        F = block_diag(*[s.F for s in sdes])
        L = block_diag(*[s.L for s in sdes])
        Qc = block_diag(*[s.Qc for s in sdes])
        P0 = block_diag(*[s.P0 for s in sdes])
        return sdes, F, L, Qc, P0


@dataclass(frozen=True)
class Sum(_Composite):
    kind = "sum"

    def _sde(self):
        sdes, F, L, Qc, P0 = self._blocks()
        H = np.hstack([s.H for s in sdes])
        return LtiSde(F, L, H, Qc, P0)

    def _eval(self, tau):
        return sum(p._eval(tau) for p in self.parts)


@dataclass(frozen=True)
class IndependentStack(_Composite):
    """Independent latent functions, one output row each."""

    kind = "stack"

    @property
    def num_outputs(self):
        return len(self.parts)

    def _sde(self):
        sdes, F, L, Qc, P0 = self._blocks()
        H = block_diag(*[s.H for s in sdes])
        return LtiSde(F, L, H, Qc, P0)

    def _eval(self, tau):
        tau = np.asarray(tau, dtype=float)
        vals = [p._eval(tau) for p in self.parts]
        out = np.zeros(tau.shape + (len(vals), len(vals)))
        for i, v in enumerate(vals):
            out[..., i, i] = v
        return out


KERNELS = {cls.kind: cls for cls in (Matern12, Matern32, Matern52, Matern72, Cosine, QuasiPeriodic, Sum,
                                     IndependentStack)}


def kernel_from_dict(data):
    """Inverse of ``Kernel.to_dict``."""
    data = dict(data)
    kind = data.pop("type")
    if kind not in KERNELS:
        raise ParameterDomainError(f"unknown kernel type {kind!r}")
    cls = KERNELS[kind]
    if issubclass(cls, _Composite):
        return cls(parts=tuple(kernel_from_dict(p) for p in data.pop("parts")))
    return cls(**data)


def _check_stable(F):
    eig = np.linalg.eigvals(F)
    if np.any(eig.real >= 0):
        raise StabilityError(f"feedback matrix has eigenvalues with non-negative real part: {eig}")


def solve_stationary(F, L, Qc):
    """Stationary covariance P0 solving F P0 + P0 F' + L Qc L' = 0."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    Qc = np.atleast_2d(np.asarray(Qc, dtype=float))
    _check_stable(F)
    noise = L @ Qc @ L.T
    P0 = sym(solve_continuous_lyapunov(F, -noise))
    res = np.abs(F @ P0 + P0 @ F.T + noise).max()
    if res > 1e-8 * max(np.abs(P0).max(), 1e-300):
        raise StabilityError(f"Lyapunov residual {res:.3e} too large")
    return P0


def to_state_space(spec):
    """LTI-SDE representation of a kernel."""
    return spec._sde()


def kernel_eval(spec, tau):
    """Closed-form kernel value at offset ``tau`` (o x o matrix for stacks)."""
    return spec._eval(np.asarray(tau, dtype=float))


def reconstruct_covariance(sde, tau):
    """H expm(F tau) P0 H' for tau >= 0; scalar when the SDE is single-output."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    phi = expm(sde.F * tau[..., None, None])
    cov = sde.H @ phi @ sde.P0 @ sde.H.T
    return cov[..., 0, 0] if sde.o == 1 else cov
