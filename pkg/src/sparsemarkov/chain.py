"""Discretised prior over inducing states and the local conditionals between them."""

from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, SegmentError
from .kernels import LtiSde
from .linalg import expm, floored_inverse, sym


@dataclass(frozen=True)
class InducingGrid:
    """Strictly increasing inducing inputs z_1 < ... < z_M, M >= 2."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).ravel()
        if z.size < 2:
            raise ValueError("an inducing grid needs at least two points")
        if not np.all(np.isfinite(z)) or np.any(np.diff(z) <= 0):
            raise ValueError("inducing inputs must be finite and strictly increasing")
        object.__setattr__(self, "z", z)

    @property
    def M(self):
        return self.z.size

    @classmethod
    def spanning(cls, x, num):
        """``num`` equally spaced points over [min(x), max(x)] inclusive."""
        x = np.asarray(x, dtype=float)
        lo, hi = float(x.min()), float(x.max())
        if hi <= lo:
            hi = lo + 1.0
        return cls(np.linspace(lo, hi, int(num)))


@dataclass(frozen=True)
class MarkovChain:
    """Transitions u_{m+1} = A_m u_m + N(0, Q_m) between consecutive inducing states."""

    sde: LtiSde
    grid: InducingGrid
    A: np.ndarray
    Q: np.ndarray
    Q_inv: np.ndarray

    @property
    def P0(self):
        return self.sde.P0

    @property
    def d(self):
        return self.sde.d

    @property
    def M(self):
        return self.grid.M

    @property
    def z(self):
        return self.grid.z

    @property
    def H(self):
        return self.sde.H


def _transition(sde, delta):
    """A = expm(F delta) and Q = P0 - A P0 A' for an array of offsets."""
    delta = np.asarray(delta, dtype=float)
    A = expm(sde.F * delta[..., None, None])
    Q = sym(sde.P0 - A @ sde.P0 @ np.swapaxes(A, -1, -2))
    return A, Q


def discretize(sde, grid):
    """Discretise ``sde`` onto ``grid``."""
    A, Q = _transition(sde, np.diff(grid.z))
    floor = 1e-12 * np.abs(sde.P0).sum(axis=1).max()
    return MarkovChain(sde, grid, A, Q, floored_inverse(Q, floor))


def assign_segments(x, grid):
    """Segment index m(n) (0-based) for each input, and the per-segment counts.

    Segments are half-open [z_m, z_{m+1}); the final segment also holds x = z_M.
    """
    x = np.asarray(x, dtype=float)
    z = grid.z
    if x.size and (x.min() < z[0] or x.max() > z[-1]):
        raise CoverageError(f"data span [{x.min()}, {x.max()}] exceeds grid [{z[0]}, {z[-1]}]")
    seg = np.clip(np.searchsorted(z, x, side="right") - 1, 0, grid.M - 2)
    counts = np.bincount(seg, minlength=grid.M - 1)
    return seg, counts


@dataclass(frozen=True)
class StateConditional:
    """s(x) | v_m ~ N(R v_m, T) with R = [R1, R2]."""

    R: np.ndarray
    T: np.ndarray


@dataclass(frozen=True)
class FunctionConditional:
    """f(x) | v_m ~ N(W v_m, nu)."""

    W: np.ndarray
    nu: np.ndarray


def state_conditionals(chain, seg, x):
    """Batched gains R (N, d, 2d) and residual covariances T (N, d, d)."""
    seg = np.asarray(seg, dtype=int)
    x = np.asarray(x, dtype=float)
    z, d = chain.z, chain.d
    left = x - z[seg]
    right = z[seg + 1] - x
    A_mx, Q_mx = _transition(chain.sde, left)
    A_x1, _ = _transition(chain.sde, right)
    gain = Q_mx @ np.swapaxes(A_x1, -1, -2) @ chain.Q_inv[seg]
    R1 = A_mx - gain @ chain.A[seg]
    R2 = gain
    T = sym(Q_mx - gain @ A_x1 @ Q_mx)

    # Exact endpoint values avoid round-off from the floored inverse.
    at_left = left == 0
    at_right = right == 0
    eye = np.eye(d)
    R1[at_left], R2[at_left], T[at_left] = eye, 0.0, 0.0
    R1[at_right], R2[at_right], T[at_right] = 0.0, eye, 0.0
    return np.concatenate([R1, R2], axis=-1), T


def _check_segment(chain, m, x):
    if not 0 <= m < chain.M - 1:
        raise SegmentError(f"segment index {m} out of range")
    if not chain.z[m] <= x <= chain.z[m + 1]:
        raise SegmentError(f"x={x} outside segment [{chain.z[m]}, {chain.z[m + 1]}]")


def state_conditional(chain, m, x):
    """Conditional of the state at ``x`` given the pair of inducing states of segment ``m``."""
    _check_segment(chain, m, x)
    R, T = state_conditionals(chain, np.array([m]), np.array([x], dtype=float))
    return StateConditional(R[0], T[0])


def function_conditional(chain, m, x):
    """Conditional of the latent outputs at ``x`` given the inducing pair of segment ``m``."""
    sc = state_conditional(chain, m, x)
    H = chain.H
    return FunctionConditional(H @ sc.R, sym(H @ sc.T @ H.T))


def forward_predictions(chain, seg, x):
    """Projection of u_m onto s(x) ahead of it: s(x) | u_m ~ N(A u_m, Q), batched."""
    return _transition(chain.sde, np.asarray(x, dtype=float) - chain.z[np.asarray(seg, dtype=int)])


def backward_transition(sde, delta):
    """Reverse-time transition s(x) | s(x + delta) ~ N(B s(x + delta), S)."""
    A, _ = _transition(sde, delta)
    B = np.swapaxes(np.linalg.solve(sde.P0, A @ sde.P0), -1, -2)
    S = sym(sde.P0 - B @ A @ sde.P0)
    return B, S
