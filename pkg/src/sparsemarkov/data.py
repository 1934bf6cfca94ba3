"""Datasets: CSV ingestion, synthetic task generators and cross-validation folds."""

import csv
from dataclasses import dataclass

import numpy as np

from .chain import _transition
from .errors import DataError
from .kernels import Matern32, Matern52, to_state_space
from .linalg import psd_sqrt

TASKS = ("binary-sign", "poisson-cox", "heteroscedastic", "banana-like-2d", "conjugate-matern")

# Ground truth of the conjugate-matern task.
CONJUGATE_TRUTH = {"variance": 2.0, "lengthscale": 1.5, "noise": 0.01, "span": 200.0}


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs sorted by ``x``; ``perm[i]`` is the original row of sorted row ``i``."""

    x: np.ndarray
    y: np.ndarray
    r: np.ndarray = None
    perm: np.ndarray = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if x.size != y.size:
            raise DataError("x and y lengths differ")
        r = None if self.r is None else np.asarray(self.r, dtype=float).reshape(x.size, -1)
        perm = self.perm
        if perm is None:
            perm = np.argsort(x, kind="stable")
            x, y = x[perm], y[perm]
            r = None if r is None else r[perm]
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "perm", np.asarray(perm))

    @property
    def N(self):
        return self.x.size

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], None if self.r is None else self.r[idx], self.perm[idx])

    def unsorted(self):
        """Arrays in the original row order."""
        order = np.argsort(self.perm, kind="stable")
        return self.x[order], self.y[order], None if self.r is None else self.r[order]


def load_csv(path, likelihood=None):
    """Read a CSV with header ``x[,r1..rp],y``; rows are validated and sorted by x."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file", 1) from None
        if len(header) < 2 or header[0] != "x" or header[-1] != "y":
            raise DataError("header must be x[,r1..rp],y", 1)
        spatial = header[1:-1]
        if any(h != f"r{i + 1}" for i, h in enumerate(spatial)):
            raise DataError("spatial columns must be named r1..rp", 1)
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", line)
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise DataError(f"non-numeric field in {row}", line) from None
            if not np.all(np.isfinite(values)):
                raise DataError("non-finite value", line)
            rows.append(values)
    if not rows:
        raise DataError("no data rows", 2)
    arr = np.array(rows)
    data = Dataset(arr[:, 0], arr[:, -1], arr[:, 1:-1] if spatial else None)
    if likelihood is not None:
        likelihood.validate(data.y)
    return data


def write_csv(path, data):
    x, y, r = data.unsorted()
    header = ["x"] + ([f"r{i + 1}" for i in range(r.shape[1])] if r is not None else []) + ["y"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(x.size):
            w.writerow([repr(float(x[i]))] + ([repr(float(v)) for v in r[i]] if r is not None else [])
                       + [repr(float(y[i]))])


def make_rng(seed):
    """Counter-based generator; the only source of randomness in the package."""
    return np.random.Generator(np.random.Philox(int(seed)))


def sample_path(kernel, x, rng):
    """Exact prior draw of f at sorted inputs ``x`` by simulating the state-space model."""
    sde = to_state_space(kernel)
    x = np.asarray(x, dtype=float)
    A, Q = _transition(sde, np.diff(x))
    roots = psd_sqrt(Q)
    s = psd_sqrt(sde.P0) @ rng.standard_normal(sde.d)
    out = np.empty((x.size, sde.o))
    out[0] = sde.H @ s
    for i in range(x.size - 1):
        s = A[i] @ s + roots[i] @ rng.standard_normal(sde.d)
        out[i + 1] = sde.H @ s
    return out[:, 0] if sde.o == 1 else out


def _binary_sign(n, rng):
    # inputs span ten periods of the oscillation
    x = np.sort(rng.uniform(0.0, 5.0, n))
    g = 12 * np.sin(4 * np.pi * x) / (0.25 * np.pi * x + 1) + rng.normal(0.0, 0.01, n)
    return Dataset(x, (g > 0).astype(float))


def _poisson_cox(n, rng):
    x = np.linspace(0.0, 100.0, n)
    f = sample_path(Matern52(1.0, 10.0), x, rng) + np.log(2.0)
    return Dataset(x, rng.poisson(np.exp(f)).astype(float))


def _heteroscedastic(n, rng):
    x = np.sort(rng.uniform(0.0, 60.0, n))
    f = sample_path(Matern32(1.0, 8.0), x, rng)
    g = sample_path(Matern32(1.0, 12.0), x, rng) - 1.0
    scale = np.log1p(np.exp(g))
    return Dataset(x, f + scale * rng.standard_normal(n))


def _banana(n, rng):
    """Two interleaved crescents; x is the sequential axis, r the spatial one."""
    half = n // 2
    t0 = rng.uniform(0.0, np.pi, half)
    t1 = rng.uniform(0.0, np.pi, n - half)
    a = np.stack([np.cos(t0), np.sin(t0)], 1)
    b = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], 1)
    pts = np.vstack([a, b]) + rng.normal(0.0, 0.15, (n, 2))
    y = np.r_[np.ones(half), np.zeros(n - half)]
    return Dataset(pts[:, 0], y, pts[:, 1:])


def _conjugate_matern(n, rng):
    t = CONJUGATE_TRUTH
    x = np.sort(rng.uniform(0.0, t["span"], n))
    f = sample_path(Matern32(t["variance"], t["lengthscale"]), x, rng)
    return Dataset(x, f + np.sqrt(t["noise"]) * rng.standard_normal(n))


_GENERATORS = {
    "binary-sign": _binary_sign, "poisson-cox": _poisson_cox, "heteroscedastic": _heteroscedastic,
    "banana-like-2d": _banana, "conjugate-matern": _conjugate_matern,
}


def generate(task, n, seed):
    """Synthetic dataset for ``task``; deterministic given ``seed``."""
    if task not in _GENERATORS:
        raise DataError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    if n < 2:
        raise DataError("need at least two data points")
    return _GENERATORS[task](int(n), make_rng(seed))


def folds(n, k, seed):
    """Contiguous blocks over the sorted order, rotated by the seed.

    Returns a list of ``k`` (train, test) index pairs; the test sets partition range(n).
    """
    if not 2 <= k <= n:
        raise DataError(f"fold count must lie in [2, {n}]")
    bounds = np.linspace(0, n, k + 1).astype(int)
    blocks = [np.arange(bounds[i], bounds[i + 1]) for i in range(k)]
    shift = int(make_rng(seed).integers(k))
    blocks = blocks[shift:] + blocks[:shift]
    all_idx = np.arange(n)
    return [(np.setdiff1d(all_idx, b), b) for b in blocks]
