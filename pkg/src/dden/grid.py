"""Time grid with its cell quadrature, plus Gaussian driver ensembles.

The calendar axis t and the default-time axis theta share one uniform grid
``t_i = i * dt``.  Densities are piecewise constant on the cells
``[theta_j, theta_{j+1})``, ``j = 0..N-1``; the mass beyond the horizon is
carried as an explicit tail scalar.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Normalization tolerance for density rows.
NORM_TOL = 1e-10
# Below this distance from 1 a nonnegative row is left untouched.
FIXED_POINT_TOL = 1e-14
# S_t <= ABSORB_TOL is treated as S_t = 0 (A_t = {S_t > 0}).
ABSORB_TOL = 1e-12


class ConfigError(ValueError):
    """Invalid configuration of a grid, model or run."""


class DegenerateRowError(ValueError):
    """A density row carries no mass or non-finite entries."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T_max] with N cells, shared by t and theta."""

    T_max: float
    N: int

    def __post_init__(self):
        if not np.isfinite(self.T_max) or self.T_max <= 0:
            raise ConfigError(f"horizon must be positive, got {self.T_max!r}")
        if int(self.N) != self.N or self.N < 2:
            raise ConfigError(f"step count must be an integer >= 2, got {self.N!r}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "T_max", float(self.T_max))

    @property
    def dt(self) -> float:
        return self.T_max / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) * self.dt

    def index(self, t: float) -> int:
        """Node index of time ``t``; raises if ``t`` is not on the grid."""
        x = float(t) / self.dt
        i = int(round(x))
        if abs(x - i) > 1e-9 * max(1.0, abs(x)) or i < 0 or i > self.N:
            raise ConfigError(f"time {t!r} is not a node of {self}")
        return i

    def to_dict(self) -> dict:
        return {"T_max": self.T_max, "N": self.N, "dt": self.dt}


def make_grid(T_max: float, N: int) -> TimeGrid:
    return TimeGrid(T_max, N)


def path_seed(master_seed: int, path: int, *tags: int) -> np.random.SeedSequence:
    """Substream for one path (and optional child tags).

    Uses numpy's SeedSequence hashing of ``(master_seed, spawn_key)`` so the
    stream of a path does not depend on how many other paths exist or on
    the order in which they are generated.
    """
    return np.random.SeedSequence(int(master_seed) & 0xFFFFFFFFFFFFFFFF,
                                  spawn_key=(int(path),) + tuple(int(t) for t in tags))


def path_rng(master_seed: int, path: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(path_seed(master_seed, path, *tags)))


@dataclass
class PathEnsemble:
    """Brownian increments ``dW[path, step, component]`` with variance dt."""

    grid: TimeGrid
    increments: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    def driver(self, component: int = 0) -> np.ndarray:
        """Cumulative driver W on the nodes, shape (n_paths, N+1)."""
        w = np.zeros((self.n_paths, self.grid.N + 1))
        np.cumsum(self.increments[:, :, component], axis=1, out=w[:, 1:])
        return w

    def subset(self, paths) -> "PathEnsemble":
        return PathEnsemble(self.grid, self.increments[paths], self.seed)


def gaussian_ensemble(grid: TimeGrid, n_paths: int, d: int, seed: int) -> PathEnsemble:
    """Draw ``n_paths`` independent d-dimensional Brownian increment paths."""
    if int(n_paths) != n_paths or n_paths < 1:
        raise ConfigError(f"n_paths must be >= 1, got {n_paths!r}")
    if int(d) != d or d < 1:
        raise ConfigError(f"driver dimension must be >= 1, got {d!r}")
    sq = np.sqrt(grid.dt)
    inc = np.empty((int(n_paths), grid.N, int(d)))
    for p in range(int(n_paths)):
        inc[p] = path_rng(seed, p).standard_normal((grid.N, int(d)))
    inc *= sq
    return PathEnsemble(grid, inc, int(seed))


@dataclass
class DensityRow:
    """One conditional density alpha_t(.) on the cells plus its tail mass."""

    cells: np.ndarray
    tail: float
    dt: float
    adjustment: float = field(default=0.0)

    def mass(self) -> float:
        return float(self.cells.sum() * self.dt + self.tail)

    def check(self, tol: float = NORM_TOL) -> None:
        if not np.all(np.isfinite(self.cells)) or not np.isfinite(self.tail):
            raise DegenerateRowError("row has non-finite entries")
        if np.any(self.cells < 0) or self.tail < 0:
            raise DegenerateRowError("row has negative entries")
        if abs(self.mass() - 1.0) > tol:
            raise DegenerateRowError(f"row mass {self.mass()!r} differs from 1")


def integrate_cells(row: DensityRow, a: float, b: float, weights=None) -> float:
    """Cell quadrature of ``f * alpha`` over ``[a, b)``.

    ``a`` and ``b`` are snapped to the nearest nodes; ``weights`` holds the
    per-cell values of f (``None`` means f = 1).  The tail is not included.
    """
    if a > b:
        raise ValueError(f"integration bounds reversed: a={a!r} > b={b!r}")
    n = row.cells.shape[-1]
    i = int(round(a / row.dt))
    j = int(round(b / row.dt))
    if i < 0 or j > n:
        raise ValueError(f"bounds [{a}, {b}] outside the grid")
    cells = row.cells[i:j]
    if weights is None:
        return float(cells.sum() * row.dt)
    w = np.asarray(weights, dtype=float)
    if w.shape[-1] == n:
        w = w[i:j]
    return float(np.dot(w, cells) * row.dt)


def renormalize_arrays(cells: np.ndarray, tail: np.ndarray, dt: float):
    """Vectorised clamp-and-rescale over leading axes.

    Returns ``(cells, tail, adjustment)`` where ``adjustment`` is the total
    clamped plus rescaled mass per row.  Rows that are already nonnegative
    and within FIXED_POINT_TOL of unit mass are returned unchanged.
    """
    cells = np.asarray(cells, dtype=float)
    tail = np.asarray(tail, dtype=float)
    neg_cells = np.minimum(cells, 0.0)
    neg_tail = np.minimum(tail, 0.0)
    clamped = -(neg_cells.sum(axis=-1) * dt + neg_tail)
    c = cells - neg_cells
    tl = tail - neg_tail
    total = c.sum(axis=-1) * dt + tl
    if np.any(~np.isfinite(total)) or np.any(total <= 0):
        raise DegenerateRowError("row with zero or non-finite total mass")
    untouched = (clamped == 0) & (np.abs(total - 1.0) <= FIXED_POINT_TOL)
    scale = np.where(untouched, 1.0, 1.0 / total)
    c = c * scale[..., None]
    tl = tl * scale
    adjustment = np.where(untouched, 0.0, clamped + np.abs(total - 1.0))
    return c, tl, adjustment


def renormalize(row: DensityRow) -> DensityRow:
    """Clamp negative cells to zero and rescale so the row has unit mass."""
    c, tl, adj = renormalize_arrays(row.cells, np.float64(row.tail), row.dt)
    return DensityRow(c, float(tl), row.dt, adjustment=float(adj))
