"""Survival functions, conditional expectations of functions of tau, and
before/after-default prices on a density surface."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .grid import ABSORB_TOL, ConfigError, DensityRow, integrate_cells
from .models import DensitySurfaceEnsemble


class DegenerateError(RuntimeError):
    """Every path is outside {S_t > 0} at the evaluation time."""


class AbsorbedPathError(ValueError):
    """Zero survival where a logarithm or ratio is required."""


def cell_points(grid) -> np.ndarray:
    """Representative default times: cell midpoints, then T_max for the tail."""
    return np.concatenate([grid.midpoints, [grid.T_max]])


@dataclass
class Payoff:
    """Bounded claim Y_T(theta) paid on the scenario path.

    ``fn(theta, w)`` evaluates the claim at default times ``theta`` given
    the driver value ``w = W_T``; inputs broadcast against each other.
    """

    T: float
    fn: Callable
    bound: float
    name: str = "custom"

    def __call__(self, theta, w):
        v = np.asarray(self.fn(np.asarray(theta, dtype=float), np.asarray(w, dtype=float)), dtype=float)
        if np.any(np.abs(v) > self.bound * (1 + 1e-12)):
            raise ConfigError(f"payoff {self.name} exceeds its declared bound {self.bound}")
        return v


def unit_payoff(T: float) -> Payoff:
    return Payoff(T, lambda u, w: np.ones(np.broadcast(u, w).shape), 1.0, "unit")


def survival_claim(T: float) -> Payoff:
    """1 if default happens at or after T."""
    return Payoff(T, lambda u, w: np.broadcast_to((u >= T).astype(float), np.broadcast(u, w).shape),
                  1.0, "survival")


def linear_capped(T: float, cap: float) -> Payoff:
    """(1 - u/cap)^+ : recovery that decays linearly with the default time."""
    return Payoff(T, lambda u, w: np.broadcast_to(np.clip(1.0 - u / cap, 0.0, None),
                                                   np.broadcast(u, w).shape), 1.0, "linear_capped")


def theta_payoff(T: float, g: Callable, bound: float, name: str = "theta_only") -> Payoff:
    return Payoff(T, lambda u, w: np.broadcast_to(g(u), np.broadcast(u, w).shape), bound, name)


PAYOFFS = {"unit": unit_payoff, "survival": survival_claim}


@dataclass
class PriceReport:
    branch: str
    t: float
    theta: Optional[float]
    estimate: float
    se: float
    n_paths: int
    model_id: str
    seed: int
    per_path: Optional[list] = field(default=None)
    per_path_se: Optional[list] = field(default=None)

    def __post_init__(self):
        if not np.isfinite(self.estimate) or not (self.se >= 0):
            raise DegenerateError(f"invalid price estimate {self.estimate!r} (se {self.se!r})")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


def _row(surface, path, k) -> DensityRow:
    cells, tail = surface.row_at([path], k)
    return DensityRow(cells[0], float(tail[0]), surface.grid.dt)


def survival(surface: DensitySurfaceEnsemble, path: int, t: float, theta: float) -> float:
    """S_t(theta) = integral of alpha_t over [theta, T_max] plus the tail."""
    g = surface.grid
    k, j = g.index(t), g.index(theta)
    if j == k and k not in set(surface.record.tolist()):
        return float(surface.surv[path, k])
    row = _row(surface, path, k)
    return integrate_cells(row, j * g.dt, g.T_max) + row.tail


def expect_f_tau(surface: DensitySurfaceEnsemble, path: int, t: float, f: Callable) -> float:
    """E[f(tau) | F_t] by cell quadrature; the tail is valued at T_max."""
    g = surface.grid
    row = _row(surface, path, g.index(t))
    vals = np.asarray(f(cell_points(g)), dtype=float)
    vals = np.broadcast_to(vals, (g.N + 1,))
    return integrate_cells(row, 0.0, g.T_max, vals[:-1]) + float(vals[-1]) * row.tail


def _mean_se(x: np.ndarray):
    n = x.shape[0]
    se = float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(x.mean()), se


def _quadrature(payoff: Payoff, cells, tails, w, j0, grid):
    """Sum_{j >= j0} Y(theta_j, w) a_j dt + Y(T_max, w) tail, per path."""
    pts = cell_points(grid)
    y = payoff(pts[None, :], np.asarray(w)[:, None])
    return (y[:, j0:grid.N] * cells[:, j0:]).sum(axis=1) * grid.dt + y[:, grid.N] * tails


def price_bd(surface: DensitySurfaceEnsemble, payoff: Payoff, t: float = 0.0,
             paths=None, m: int = 64) -> PriceReport:
    """Before-default value E[int_t^inf Y_T(u) alpha_T(u) du | F_t] / S_t.

    At t = 0 the expectation is the pooled mean over paths.  At t > 0 each
    requested path is branched ``m`` times from t to T; paths outside
    {S_t > 0} get 0.
    """
    g = surface.grid
    k, K = g.index(t), g.index(payoff.T)
    if k > K:
        raise ConfigError("evaluation time must not exceed the payoff horizon")
    if k == 0:
        cells, tails = surface.row_at(np.arange(surface.n_paths), K)
        w = surface.driver(0)[:, K]
        v = _quadrature(payoff, cells, tails, w, 0, g)
        est, se = _mean_se(v)
        return PriceReport("bd", 0.0, None, est, se, surface.n_paths, surface.model_id, surface.seed)
    paths = [0] if paths is None else list(np.atleast_1d(paths))
    alive = surface.surv[paths, k] > ABSORB_TOL
    if not np.any(alive):
        raise DegenerateError(f"all requested paths are absorbed at t={t}")
    ests, ses = [], []
    for p, ok in zip(paths, alive):
        if not ok:
            ests.append(0.0)
            ses.append(0.0)
            continue
        blk, w = surface.branch(int(p), k, K, m, tag=1)
        v = _quadrature(payoff, blk.rows[:, 0], blk.tails[:, 0], w[:, -1], k, g)
        e, s = _mean_se(v)
        S = surface.surv[p, k]
        ests.append(e / S)
        ses.append(s / S)
    ests, ses = np.array(ests), np.array(ses)
    est = float(ests.mean())
    se = float(np.sqrt((ses ** 2).sum()) / len(paths))
    return PriceReport("bd", float(t), None, est, se, len(paths), surface.model_id, surface.seed,
                       ests.tolist(), ses.tolist())


def price_ad(surface: DensitySurfaceEnsemble, payoff: Payoff, theta: float, t: float,
             paths=None, m: int = 64) -> PriceReport:
    """After-default value E[Y_T(theta) alpha_T(theta) | F_t] / alpha_t(theta).

    Zero where alpha_t(theta) = 0.  At t = 0 (so theta = 0) the expectation
    is pooled over paths; otherwise each requested path is branched.
    """
    g = surface.grid
    j, k, K = g.index(theta), g.index(t), g.index(payoff.T)
    if not j <= k <= K or j >= g.N:
        raise ConfigError("after-default pricing needs theta <= t <= T and theta < T_max")
    if k == 0:
        cells, _ = surface.row_at(np.arange(surface.n_paths), K)
        a0 = surface.alpha[:, 0, 0]
        w = surface.driver(0)[:, K]
        v = payoff(theta, w) * cells[:, j]
        est, se = _mean_se(v)
        scale = float(a0.mean())
        if scale <= 0:
            return PriceReport("ad", 0.0, float(theta), 0.0, 0.0, surface.n_paths,
                               surface.model_id, surface.seed)
        return PriceReport("ad", 0.0, float(theta), est / scale, se / scale, surface.n_paths,
                           surface.model_id, surface.seed)
    paths = [0] if paths is None else list(np.atleast_1d(paths))
    ests, ses = [], []
    for p in paths:
        cells, _ = surface.row_at([p], k)
        a_t = float(cells[0, j])
        if a_t <= 0:
            ests.append(0.0)
            ses.append(0.0)
            continue
        blk, w = surface.branch(int(p), k, K, m, tag=2)
        v = payoff(theta, w[:, -1]) * blk.rows[:, 0, j]
        e, s = _mean_se(v)
        ests.append(e / a_t)
        ses.append(s / a_t)
    ests, ses = np.array(ests), np.array(ses)
    return PriceReport("ad", float(t), float(theta), float(ests.mean()),
                       float(np.sqrt((ses ** 2).sum()) / len(paths)), len(paths),
                       surface.model_id, surface.seed, ests.tolist(), ses.tolist())


def forward_hazard(surface: DensitySurfaceEnsemble, path: int, t: float, theta: float) -> float:
    """-(ln S_t(theta + dtheta) - ln S_t(theta)) / dtheta."""
    g = surface.grid
    j = g.index(theta)
    if j >= g.N:
        raise ConfigError("theta must be below the horizon")
    row = _row(surface, path, g.index(t))
    s0 = integrate_cells(row, j * g.dt, g.T_max) + row.tail
    s1 = integrate_cells(row, (j + 1) * g.dt, g.T_max) + row.tail
    if s0 <= ABSORB_TOL or s1 <= ABSORB_TOL:
        raise AbsorbedPathError(f"zero survival at theta={theta} on path {path}")
    return float(-(np.log(s1) - np.log(s0)) / g.dt)


def simulated_forward_hazard(surface: DensitySurfaceEnsemble, path: int, t: float) -> np.ndarray:
    """Internally simulated lambda_t(theta_j) of a multiplicative HJM surface."""
    if surface.model_id != "hjm_mult":
        raise ConfigError("only multiplicative HJM surfaces carry simulated forward hazards")
    k = surface.grid.index(t)
    state = surface.model.state_at(surface.ensemble.increments[[path]], k, [(path,)])
    return state[0][0].copy()


def check_immersion(surface: DensitySurfaceEnsemble) -> float:
    """max |alpha_t(theta) - alpha_theta(theta)| / alpha_theta(theta) over theta < t.

    Absolute differences are used where alpha_theta(theta) = 0; absorbed
    paths are excluded.
    """
    keep = ~surface.absorbed
    worst = 0.0
    for r, k in enumerate(surface.record):
        k = min(int(k), surface.grid.N)
        if k == 0:
            continue
        a = surface.alpha[keep, r, :k]
        d = surface.diag_alpha[keep, :k]
        diff = np.abs(a - d)
        rel = np.where(d > 0, diff / np.where(d > 0, d, 1.0), diff)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
