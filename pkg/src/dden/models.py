"""Constructors of conditional-density surface ensembles.

A surface stores, per path, the density rows alpha_t(.) at a set of
recorded calendar nodes together with the diagonal alpha_t(t) and the
survival process S_t at every node.  Models are deterministic functions of
the driver increments, so any path can be replayed from its seed.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .grid import (ABSORB_TOL, ConfigError, DensityRow, PathEnsemble, TimeGrid,
                   gaussian_ensemble, path_rng, renormalize_arrays)

# substream tags below the path index
TAG_COX = 1
TAG_BRANCH = 2
TAG_DEFAULT = 3

# maximum clamp/rescale mass tolerated per row
MAX_ADJUSTMENT = 1e-6
# default memory budget for stored rows when no record schedule is given
ROW_BUDGET_BYTES = 256 * 2**20


class ModelError(RuntimeError):
    """Simulation produced an unusable surface."""


def n_workers() -> int:
    """Worker cap from DDEN_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("DDEN_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class HjmMultiplicativeParams:
    """Initial forward hazard and deterministic volatility loading on cells."""

    lambda0: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        lam0 = np.asarray(self.lambda0, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if lam0.shape != b.shape or lam0.ndim != 1:
            raise ConfigError("lambda0 and b must be 1-d arrays of equal length")
        if np.any(~np.isfinite(lam0)) or np.any(lam0 <= 0):
            raise ConfigError("lambda0 must be positive on every cell")
        if np.any(~np.isfinite(b)) or np.any(b > 0):
            raise ConfigError("b must be non-positive on every cell")
        object.__setattr__(self, "lambda0", lam0)
        object.__setattr__(self, "b", b)

    @classmethod
    def flat(cls, grid: TimeGrid, lambda0: float, b: float) -> "HjmMultiplicativeParams":
        return cls(np.full(grid.N, float(lambda0)), np.full(grid.N, float(b)))

    def to_dict(self) -> dict:
        return {"lambda0": self.lambda0.tolist(), "b": self.b.tolist()}


@dataclass(frozen=True)
class CoxParams:
    """Intensity exp(x_t) with x an Ornstein-Uhlenbeck state."""

    x0: float
    kappa: float
    mu: float
    sigma: float
    m: int = 16
    se_bound: float = float("inf")

    def __post_init__(self):
        if self.sigma < 0 or self.kappa < 0:
            raise ConfigError("Cox sigma and kappa must be >= 0")
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError("inner path count m must be >= 1")
        if not all(np.isfinite([self.x0, self.mu])):
            raise ConfigError("Cox x0 and mu must be finite")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdditiveVolSpec:
    """Volatility family z_t(theta) of the density martingales.

    ``z(t, theta, w)`` receives the node time with the cell nodes, plus the
    current driver values ``w`` of shape (B, d), and returns an array
    broadcastable to (B, N, d).  ``z_tail`` is the volatility of the tail
    mass (same calling convention, shape (B, d)) or None.
    """

    z: Callable
    alpha0: DensityRow
    z_tail: Optional[Callable] = None
    projected: bool = False
    label: str = "custom"
    options: dict = field(default_factory=dict)

    def project(self) -> "AdditiveVolSpec":
        """Return a spec whose z sums to zero against the tail volatility.

        With a tail volatility the Dtheta-weighted mean excess is removed
        from z; without one the residual is assigned to the tail.
        """
        if self.projected:
            return self
        z, z_tail = self.z, self.z_tail
        dt = self.alpha0.dt
        T = dt * self.alpha0.cells.shape[0]

        def zp(t, theta, w):
            v = np.broadcast_to(_as3(z(t, theta, w), w.shape[0], theta.shape[0], w.shape[1]),
                                (w.shape[0], theta.shape[0], w.shape[1]))
            if z_tail is None:
                return v
            total = v.sum(axis=1) * dt + _as2(z_tail(t, w), w.shape[0], w.shape[1])
            return v - (total / T)[:, None, :]

        def zt(t, w):
            if z_tail is not None:
                return _as2(z_tail(t, w), w.shape[0], w.shape[1])
            theta = np.arange(self.alpha0.cells.shape[0]) * dt
            v = _as3(z(t, theta, w), w.shape[0], theta.shape[0], w.shape[1])
            return -v.sum(axis=1) * dt

        return AdditiveVolSpec(zp, self.alpha0, zt, True, self.label, dict(self.options))


def _as3(v, B, N, d):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[None, :, None]
    elif v.ndim == 2:
        v = v[:, :, None] if d == 1 or v.shape == (B, N) else v[None]
    return np.broadcast_to(v, (B, N, d))


def _as2(v, B, d):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v[None, None]
    elif v.ndim == 1:
        v = v[:, None] if v.shape[0] == B and d == 1 else v[None]
    return np.broadcast_to(v, (B, d))


def step_volatility(grid: TimeGrid, c: float, alpha0: DensityRow) -> AdditiveVolSpec:
    """z_t(theta) = c on the first half of the horizon, -c on the second."""
    sign = np.where(np.arange(grid.N) < grid.N // 2, 1.0, -1.0)
    if grid.N % 2:
        raise ConfigError("the step volatility family needs an even step count")

    def z(t, theta, w):
        return c * sign

    return AdditiveVolSpec(z, alpha0, lambda t, w: 0.0, projected=True,
                           label="step", options={"c": float(c)})


def exponential_row(grid: TimeGrid, lam: float) -> DensityRow:
    """Exact cell masses of an exponential law with rate ``lam``."""
    theta = grid.nodes[:-1]
    cells = np.exp(-lam * theta) * (-np.expm1(-lam * grid.dt)) / grid.dt
    return DensityRow(cells, float(np.exp(-lam * grid.T_max)), grid.dt)


# ---------------------------------------------------------------------------
# surface container


@dataclass
class DensitySurfaceEnsemble:
    """Per-path density rows at recorded nodes plus per-node diagonals.

    Attributes:
        grid: Shared t/theta grid.
        model_id: Model name ("constant", "hjm_mult", "hjm_add", "cox",
            or "custom").
        params: JSON-able model parameters.
        seed: Master seed of the driver ensemble.
        record: Recorded node indices, increasing, shape (R,).
        alpha: Rows alpha_{t_r}(theta_j), shape (n_paths, R, N).
        tail: Mass beyond the horizon per recorded row, (n_paths, R).
        diag_alpha: alpha_{t_k}(t_k) for k < N, (n_paths, N).
        surv: S_{t_k} for k <= N, (n_paths, N + 1).
        zeta_F: First node with S <= ABSORB_TOL, N + 1 if never.
        adjust: Clamp/rescale mass per recorded row.
        neg_count: Count of (step, cell) pairs with a negative hazard.
        inner_se: Largest nested-estimate standard error per row (Cox).
    """

    grid: TimeGrid
    model_id: str
    params: dict
    seed: int
    record: np.ndarray
    alpha: np.ndarray
    tail: np.ndarray
    diag_alpha: np.ndarray
    surv: np.ndarray
    zeta_F: np.ndarray
    adjust: np.ndarray
    neg_count: np.ndarray
    inner_se: Optional[np.ndarray] = None
    d: int = 1
    model: Optional["_Model"] = field(default=None, repr=False)
    _ensemble: Optional[PathEnsemble] = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.surv.shape[0]

    @property
    def absorbed(self) -> np.ndarray:
        return self.zeta_F <= self.grid.N

    @property
    def record_times(self) -> np.ndarray:
        return self.record * self.grid.dt

    @property
    def ensemble(self) -> PathEnsemble:
        if self._ensemble is None:
            self._ensemble = gaussian_ensemble(self.grid, self.n_paths, self.d, self.seed)
        return self._ensemble

    def driver(self, component: int = 0) -> np.ndarray:
        return self.ensemble.driver(component)

    def slot(self, k: int) -> int:
        """Row slot of node ``k``; raises if the node was not recorded."""
        r = int(np.searchsorted(self.record, k))
        if r >= self.record.shape[0] or self.record[r] != k:
            raise ConfigError(f"node {k} (t={k * self.grid.dt:g}) is not a recorded row; "
                              f"recorded nodes: {self.record.tolist()}")
        return r

    def row(self, path: int, t: float) -> DensityRow:
        r = self.slot(self.grid.index(t))
        return DensityRow(self.alpha[path, r], float(self.tail[path, r]), self.grid.dt,
                          float(self.adjust[path, r]))

    @property
    def zeta_theta(self) -> np.ndarray:
        """First recorded node at which alpha_t(theta_j) = 0, N + 1 if never."""
        zero = self.alpha <= 0.0
        hit = zero.any(axis=1)
        first = np.argmax(zero, axis=1)
        return np.where(hit, self.record[first], self.grid.N + 1)

    def check_rows(self, tol: float = 1e-10) -> float:
        """Largest normalization residual over all rows; raises on violation."""
        if np.any(self.alpha < 0) or np.any(self.tail < 0):
            raise ModelError("surface has negative density entries")
        res = float(np.max(np.abs(self.alpha.sum(axis=2) * self.grid.dt + self.tail - 1.0)))
        if res > tol:
            raise ModelError(f"row normalization residual {res:.3e} exceeds {tol:g}")
        return res

    def subset(self, paths) -> "DensitySurfaceEnsemble":
        paths = np.asarray(paths)
        ens = self._ensemble.subset(paths) if self._ensemble is not None else None
        out = DensitySurfaceEnsemble(
            self.grid, self.model_id, dict(self.params), self.seed, self.record,
            self.alpha[paths], self.tail[paths], self.diag_alpha[paths], self.surv[paths],
            self.zeta_F[paths], self.adjust[paths], self.neg_count[paths],
            None if self.inner_se is None else self.inner_se[paths], self.d, self.model, ens)
        return out

    @property
    def immersed(self) -> bool:
        """True when alpha_t(theta) = alpha_theta(theta) for theta <= t by construction."""
        return self.model is not None and self.model.immersed

    def alpha_past(self, k: int) -> np.ndarray:
        """alpha_{t_k}(theta_j) for j < k, shape (n_paths, k)."""
        if self.immersed:
            return self.diag_alpha[:, :k]
        return self.alpha[:, self.slot(k), :k]

    def _need_model(self):
        if self.model is None:
            raise ConfigError("this surface has no simulator attached; replay is unavailable")
        return self.model

    def row_at(self, paths, k: int):
        """Full rows (cells, tails) at node ``k`` for ``paths``, replaying if needed."""
        paths = np.atleast_1d(np.asarray(paths))
        r = np.searchsorted(self.record, k)
        if r < self.record.shape[0] and self.record[r] == k:
            return self.alpha[paths, r], self.tail[paths, r]
        model = self._need_model()
        keys = [(int(p),) for p in paths]
        inc = self.ensemble.increments[paths]
        state = model.state_at(inc, k, keys)
        blk = model.run(state, inc[:, k:k], k, np.zeros(1, dtype=np.int64), 1, keys)
        return blk.rows[:, 0], blk.tails[:, 0]

    def columns(self, cols: np.ndarray, chunk: int = 256) -> np.ndarray:
        """alpha_{t_s}(theta_{cols[p, c]}) for every node s, shape (n, C, N + 1).

        Paths are replayed from their increments; entries with s < cols are
        only defined for models that compute them (NaN otherwise).
        """
        model = self._need_model()
        cols = np.asarray(cols, dtype=np.int64)
        if cols.ndim == 1:
            cols = cols[:, None]
        n, C = cols.shape
        N = self.grid.N
        if n != self.n_paths or cols.min() < 0 or cols.max() >= N:
            raise ConfigError("column indices must be cells of every path")
        out = np.empty((n, C, N + 1))
        no_rows = np.full(N + 1, -1, dtype=np.int64)

        def work(idx):
            keys = [(int(p),) for p in idx]
            blk = model.run(model.initial_state(idx.shape[0]), self.ensemble.increments[idx],
                            0, no_rows, 0, keys, cols[idx])
            return idx, blk.cols

        chunks = _chunks(n, chunk)
        if n_workers() > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(n_workers()) as ex:
                results = list(ex.map(work, chunks))
        else:
            results = (work(c) for c in chunks)
        for idx, cv in results:
            out[idx[0]:idx[-1] + 1] = cv
        for p in np.flatnonzero(self.absorbed):
            out[p, :, self.zeta_F[p]:] = out[p, :, self.zeta_F[p]][:, None]
        return out

    def branch(self, path: int, k: int, K: int, m: int, tag: int = 0):
        """Simulate ``m`` continuations of ``path`` from node k to node K.

        Returns the block (rows and tails at node K, diagonals and survival
        on nodes k..K) and the inner driver values W on nodes k..K, (m, K-k+1).
        """
        model = self._need_model()
        if not 0 <= k <= K <= self.grid.N:
            raise ConfigError(f"branch needs 0 <= k <= K <= N, got k={k}, K={K}")
        inc = self.ensemble.increments[[path]]
        state = model.state_at(inc, k, [(int(path),)])
        state = model.take(state, np.zeros(m, dtype=np.int64))
        rng = path_rng(self.seed, path, TAG_BRANCH, k, K, tag)
        dW = rng.standard_normal((m, K - k, self.d)) * np.sqrt(self.grid.dt)
        slots = np.full(K - k + 1, -1, dtype=np.int64)
        slots[-1] = 0
        keys = [(int(path), TAG_BRANCH, k, K, tag, i) for i in range(m)]
        blk = model.run(state, dW, k, slots, 1, keys)
        w = np.empty((m, K - k + 1))
        w[:, 0] = inc[0, :k, 0].sum()
        np.cumsum(dW[:, :, 0], axis=1, out=w[:, 1:])
        w[:, 1:] += w[:, :1]
        return blk, w

    def metadata(self) -> dict:
        return {"model_id": self.model_id, "seed": self.seed, "grid": self.grid.to_dict(),
                "n_paths": self.n_paths, "record": self.record.tolist(),
                "params": self.params}


# ---------------------------------------------------------------------------
# model runners


@dataclass
class _Block:
    diag: np.ndarray
    surv: np.ndarray
    rows: np.ndarray
    tails: np.ndarray
    adjust: np.ndarray
    neg_count: np.ndarray
    inner_se: Optional[np.ndarray]
    state: tuple
    cols: Optional[np.ndarray] = None


def _no_cols(B):
    return np.zeros((B, 0), dtype=np.int64)


class _Model:
    """Pathwise simulator; subclasses implement ``initial_state`` and ``run``.

    ``run(state, dW, k0, slots, n_rows, keys, cols)`` advances ``B`` paths
    from node ``k0`` over ``dW.shape[1]`` steps.  ``slots[kk]`` is the row
    slot of node ``k0 + kk`` or -1; ``keys`` are per-path spawn keys for
    nested substreams; ``cols`` (B, C) are cells whose values
    alpha_s(theta_c) are returned for every node s of the block (only
    ``s >= c`` is guaranteed).
    """

    model_id = "custom"
    immersed = False

    def __init__(self, grid: TimeGrid, seed: int, d: int = 1):
        self.grid = grid
        self.seed = int(seed)
        self.d = d

    def initial_state(self, B: int) -> tuple:
        raise NotImplementedError

    def run(self, state, dW, k0, slots, n_rows, keys, cols=None) -> _Block:
        raise NotImplementedError

    def params_dict(self) -> dict:
        return {}

    @staticmethod
    def take(state, idx) -> tuple:
        return tuple(np.ascontiguousarray(s[idx]) for s in state)

    def state_at(self, dW: np.ndarray, k: int, keys) -> tuple:
        """Replay paths from node 0 to node ``k`` and return their state."""
        B = dW.shape[0]
        state = self.initial_state(B)
        if k == 0:
            return state
        slots = np.full(k + 1, -1, dtype=np.int64)
        return self.run(state, dW[:, :k], 0, slots, 0, keys).state


class ConstantHazardModel(_Model):
    model_id = "constant"
    immersed = True

    def __init__(self, grid, seed, lam, d=1):
        super().__init__(grid, seed, d)
        self.lam = float(lam)

    def params_dict(self):
        return {"lambda": self.lam, "d": self.d}

    def initial_state(self, B):
        return (np.zeros(B),)

    def run(self, state, dW, k0, slots, n_rows, keys, cols=None):
        B, K = dW.shape[0], dW.shape[1]
        g = self.grid
        row = exponential_row(g, self.lam)
        nodes = np.arange(k0, k0 + K + 1)
        surv = np.broadcast_to(np.exp(-self.lam * nodes * g.dt), (B, K + 1)).copy()
        diag = np.full((B, K + 1), np.nan)
        ok = nodes < g.N
        diag[:, ok] = row.cells[nodes[ok]]
        rows = np.broadcast_to(row.cells, (B, n_rows, g.N)).copy()
        tails = np.full((B, n_rows), row.tail)
        cv = None
        if cols is not None:
            cv = np.repeat(row.cells[cols][:, :, None], K + 1, axis=2)
        return _Block(diag, surv, rows, tails, np.zeros((B, n_rows)),
                      np.zeros(B, dtype=np.int64), None, state, cv)


class HjmMultiplicativeModel(_Model):
    model_id = "hjm_mult"

    def __init__(self, grid, seed, params: HjmMultiplicativeParams):
        super().__init__(grid, seed, 1)
        if params.lambda0.shape[0] != grid.N:
            raise ConfigError(f"HJM parameters have {params.lambda0.shape[0]} cells, grid has {grid.N}")
        self.params = params
        self.b_levels, self.b_idx = np.unique(params.b, return_inverse=True)
        self.b_idx = self.b_idx.astype(np.int64)

    def params_dict(self):
        return self.params.to_dict()

    def initial_state(self, B):
        lam = np.tile(self.params.lambda0, (B, 1))
        return (lam, lam.copy())

    def run(self, state, dW, k0, slots, n_rows, keys, cols=None):
        lam, zeta = (np.array(s, dtype=float, order="C", copy=True) for s in state)
        B, K = dW.shape[0], dW.shape[1]
        N = self.grid.N
        rows = np.empty((B, n_rows, N))
        tails = np.empty((B, n_rows))
        neg_mass = np.zeros((B, n_rows))
        diag = np.empty((B, K + 1))
        surv = np.empty((B, K + 1))
        neg = np.zeros(B, dtype=np.int64)
        if cols is None:
            c_in = _no_cols(B)
            order = None
        else:
            order = np.argsort(cols, axis=1, kind="stable")
            c_in = np.ascontiguousarray(np.take_along_axis(cols, order, axis=1), dtype=np.int64)
        cv = np.empty((B, c_in.shape[1], K + 1))
        _kernels.hjm_mult_run(lam, zeta, self.b_levels, self.b_idx,
                              np.ascontiguousarray(dW[:, :, 0]), k0, self.grid.dt,
                              np.ascontiguousarray(slots, dtype=np.int64),
                              rows, tails, neg_mass, diag, surv, neg, c_in, cv)
        if order is not None:
            out = np.empty_like(cv)
            np.put_along_axis(out, order[:, :, None], cv, axis=1)
            cv = out
        else:
            cv = None
        return _Block(diag, surv, rows, tails, neg_mass, neg, None, (lam, zeta), cv)


class CoxModel(_Model):
    """State is (x, Lambda, diagonal history)."""

    model_id = "cox"
    immersed = True

    def __init__(self, grid, seed, params: CoxParams):
        super().__init__(grid, seed, 1)
        self.params = params
        dt = grid.dt
        self.phi = float(np.exp(-params.kappa * dt))
        if params.kappa > 0:
            self.sig_eps = params.sigma * float(np.sqrt(-np.expm1(-2 * params.kappa * dt) / (2 * params.kappa)))
        else:
            self.sig_eps = params.sigma * float(np.sqrt(dt))

    def params_dict(self):
        return self.params.to_dict()

    def initial_state(self, B):
        return (np.full(B, float(self.params.x0)), np.zeros(B), np.zeros((B, self.grid.N)))

    def _inner_normals(self, keys, k):
        n = self.grid.N - k
        m = self.params.m
        z = np.empty((len(keys), m, n))
        for p, key in enumerate(keys):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(self.seed, spawn_key=tuple(key) + (TAG_COX, k))))
            z[p] = rng.standard_normal((m, n))
        return z

    def run(self, state, dW, k0, slots, n_rows, keys, cols=None):
        p = self.params
        x, Lam, hist = (np.array(s, dtype=float, copy=True) for s in state)
        B, K = dW.shape[0], dW.shape[1]
        N = self.grid.N
        dt = self.grid.dt
        xi = np.ascontiguousarray(dW[:, :, 0]) / np.sqrt(dt)
        diag = np.empty((B, K + 1))
        surv = np.empty((B, K + 1))
        xs = np.empty((B, K + 1))
        Ls = np.empty((B, K + 1))
        _kernels.cox_outer(x, Lam, xi, p.mu, self.phi, self.sig_eps, dt, diag, surv, xs, Ls)
        top = min(k0 + K + 1, N)
        hist[:, k0:top] = diag[:, :top - k0]
        if k0 + K == N:
            diag[:, K] = np.nan
        rows = np.zeros((B, n_rows, N))
        tails = np.empty((B, n_rows))
        inner_se = np.zeros((B, n_rows))
        for kk in np.flatnonzero(slots >= 0):
            r = slots[kk]
            k = k0 + kk
            rows[:, r, :k] = hist[:, :k]
            if k < N:
                z = self._inner_normals(keys, k)
                cells = np.empty((B, N - k))
                se = np.empty(B)
                tl = np.empty(B)
                _kernels.cox_inner(xs[:, kk].copy(), Ls[:, kk].copy(), z, p.mu, self.phi,
                                   self.sig_eps, dt, cells, tl, se)
                rows[:, r, k:] = cells
                rows[:, r, k] = diag[:, kk]
                tails[:, r] = tl
                inner_se[:, r] = se
            else:
                tails[:, r] = surv[:, kk]
        cv = None
        if cols is not None:
            nodes = np.arange(k0, k0 + K + 1)
            cv = np.where(nodes[None, None, :] >= cols[:, :, None],
                          np.take_along_axis(hist, np.minimum(cols, N - 1), axis=1)[:, :, None],
                          np.nan)
        return _Block(diag, surv, rows, tails, np.zeros((B, n_rows)),
                      np.zeros(B, dtype=np.int64), inner_se, (x, Lam, hist), cv)


class HjmAdditiveModel(_Model):
    model_id = "hjm_add"

    def __init__(self, grid, seed, spec: AdditiveVolSpec, d: int = 1):
        super().__init__(grid, seed, d)
        if spec.alpha0.cells.shape[0] != grid.N:
            raise ConfigError("initial row does not match the grid")
        spec.alpha0.check()
        self.spec = spec

    def params_dict(self):
        return {"vol": self.spec.label, **self.spec.options, "d": self.d,
                "alpha0": self.spec.alpha0.cells.tolist(), "tail0": self.spec.alpha0.tail}

    def initial_state(self, B):
        a0 = self.spec.alpha0
        return (np.tile(a0.cells, (B, 1)), np.full(B, a0.tail), np.zeros((B, self.d)))

    def _vol(self, t, w):
        g = self.grid
        B, d = w.shape
        z = _as3(self.spec.z(t, g.nodes[:-1], w), B, g.N, d)
        zt = _as2(self.spec.z_tail(t, w), B, d) if self.spec.z_tail is not None else np.zeros((B, d))
        total = z.sum(axis=1) * g.dt + zt
        if np.max(np.abs(total)) > 1e-12:
            raise ModelError("additive volatility does not sum to zero against the tail; "
                             "call AdditiveVolSpec.project() first")
        return z, zt

    def run(self, state, dW, k0, slots, n_rows, keys, cols=None):
        g = self.grid
        a, tl, w = (np.array(s, dtype=float, copy=True) for s in state)
        B, K = dW.shape[0], dW.shape[1]
        N, dt = g.N, g.dt
        diag = np.empty((B, K + 1))
        surv = np.empty((B, K + 1))
        rows = np.empty((B, n_rows, N))
        tails = np.empty((B, n_rows))
        adjust = np.zeros((B, n_rows))
        neg = np.zeros(B, dtype=np.int64)
        step_adj = np.zeros(B)
        cv = None if cols is None else np.empty((B, cols.shape[1], K + 1))
        for kk in range(K + 1):
            k = k0 + kk
            surv[:, kk] = a[:, k:].sum(axis=1) * dt + tl
            diag[:, kk] = a[:, k] if k < N else np.nan
            if cv is not None:
                cv[:, :, kk] = np.take_along_axis(a, cols, axis=1)
            if slots[kk] >= 0:
                r = slots[kk]
                rows[:, r] = a
                tails[:, r] = tl
                adjust[:, r] = step_adj
                step_adj = np.zeros(B)
            if kk == K:
                break
            z, zt = self._vol(k * dt, w)
            inc = dW[:, kk, :]
            a -= np.einsum("bnd,bd->bn", z, inc)
            tl -= np.einsum("bd,bd->b", zt, inc)
            w += inc
            neg += (a < 0).sum(axis=1) + (tl < 0)
            a, tl, adj = renormalize_arrays(a, tl, dt)
            step_adj = np.maximum(step_adj, adj)
        return _Block(diag, surv, rows, tails, adjust, neg, None, (a, tl, w), cv)


# ---------------------------------------------------------------------------
# assembly


def record_schedule(grid: TimeGrid, n_paths: int, record=None, record_every=None) -> np.ndarray:
    """Recorded node indices; always contains nodes 0 and N."""
    N = grid.N
    if record is not None:
        idx = np.unique(np.concatenate([[0, N], [grid.index(t) for t in record]]))
    else:
        if record_every is None:
            per_row = max(1, n_paths) * N * 8
            record_every = max(1, int(np.ceil((N + 1) * per_row / ROW_BUDGET_BYTES)))
        record_every = int(record_every)
        if record_every < 1:
            raise ConfigError("record_every must be >= 1")
        idx = np.unique(np.concatenate([np.arange(0, N + 1, record_every), [N]]))
    return idx.astype(np.int64)


def _chunks(n: int, size: int):
    return [np.arange(s, min(n, s + size)) for s in range(0, n, size)]


def run_surface(model: _Model, ensemble: PathEnsemble, record: np.ndarray,
                chunk: int = 256) -> DensitySurfaceEnsemble:
    """Simulate every path of ``ensemble`` and assemble the surface."""
    g = model.grid
    if ensemble.grid != g:
        raise ConfigError("ensemble grid does not match model grid")
    n = ensemble.n_paths
    N = g.N
    R = record.shape[0]
    slots = np.full(N + 1, -1, dtype=np.int64)
    slots[record] = np.arange(R)
    alpha = np.empty((n, R, N))
    tail = np.empty((n, R))
    diag = np.empty((n, N))
    surv = np.empty((n, N + 1))
    adjust = np.empty((n, R))
    neg = np.empty(n, dtype=np.int64)
    inner_se = None

    def work(idx):
        keys = [(int(p),) for p in idx]
        state = model.initial_state(idx.shape[0])
        return idx, model.run(state, ensemble.increments[idx], 0, slots, R, keys)

    chunks = _chunks(n, chunk)
    if n_workers() > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(n_workers()) as ex:
            results = ex.map(work, chunks)
            results = list(results)
    else:
        results = (work(c) for c in chunks)
    for idx, blk in results:
        sl = slice(idx[0], idx[-1] + 1)
        diag[sl] = blk.diag[:, :N]
        surv[sl] = blk.surv
        alpha[sl] = blk.rows
        tail[sl] = blk.tails
        adjust[sl] = blk.adjust
        neg[sl] = blk.neg_count
        if blk.inner_se is not None:
            if inner_se is None:
                inner_se = np.zeros((n, R))
            inner_se[sl] = blk.inner_se
    return _finish(g, model, ensemble, record, alpha, tail, diag, surv, adjust, neg, inner_se)


def _finish(g, model, ensemble, record, alpha, tail, diag, surv, adjust, neg, inner_se):
    N = g.N
    a, tl, adj = renormalize_arrays(alpha, tail, g.dt)
    # renormalize only touches rows that are off by more than round-off
    alpha[...] = a
    tail[...] = tl
    adjust = adjust + adj
    absorbed = surv <= ABSORB_TOL
    zeta_F = np.where(absorbed.any(axis=1), np.argmax(absorbed, axis=1), N + 1)
    for p in np.flatnonzero(zeta_F <= N):
        z = zeta_F[p]
        surv[p, z:] = surv[p, z]
        diag[p, z:] = diag[p, min(z, N - 1)]
        later = np.flatnonzero(record >= z)
        if later.size:
            alpha[p, later] = alpha[p, later[0]]
            tail[p, later] = tail[p, later[0]]
    surf = DensitySurfaceEnsemble(g, model.model_id, model.params_dict(), model.seed,
                                  record, alpha, tail, diag, surv, zeta_F, adjust, neg,
                                  inner_se, model.d, model, ensemble)
    worst = float(adjust.max()) if adjust.size else 0.0
    if worst > MAX_ADJUSTMENT:
        raise ModelError(f"row clamp/rescale mass {worst:.3e} exceeds {MAX_ADJUSTMENT:g}")
    return surf


# ---------------------------------------------------------------------------
# public constructors


def build_constant_hazard(lam: float, grid: TimeGrid, n_paths: int, seed: int = 0,
                          record=None, record_every=None, d: int = 1) -> DensitySurfaceEnsemble:
    """Deterministic surface alpha_t(theta) = exact cell mass of Exp(lam)."""
    if not np.isfinite(lam) or lam <= 0:
        raise ConfigError(f"hazard must be positive, got {lam!r}")
    if int(n_paths) != n_paths or n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    model = ConstantHazardModel(grid, seed, lam, d)
    rec = record_schedule(grid, int(n_paths), record, record_every)
    N, n, R = grid.N, int(n_paths), rec.shape[0]
    row = exponential_row(grid, lam)
    alpha = np.broadcast_to(row.cells, (n, R, N))
    tail = np.broadcast_to(np.float64(row.tail), (n, R))
    surv = np.tile(np.exp(-lam * grid.nodes), (n, 1))
    diag = np.tile(row.cells, (n, 1))
    absorbed = surv <= ABSORB_TOL
    zeta_F = np.where(absorbed.any(axis=1), np.argmax(absorbed, axis=1), N + 1)
    for p in np.flatnonzero(zeta_F <= N):
        z = zeta_F[p]
        surv[p, z:] = surv[p, z]
        diag[p, z:] = diag[p, min(z, N - 1)]
    return DensitySurfaceEnsemble(grid, "constant", model.params_dict(), int(seed), rec,
                                  alpha, tail, diag, surv, zeta_F, np.zeros((n, R)),
                                  np.zeros(n, dtype=np.int64), None, d, model, None)


def simulate_hjm_multiplicative(params: HjmMultiplicativeParams, ensemble: PathEnsemble,
                                record=None, record_every=None,
                                chunk: int = 128) -> DensitySurfaceEnsemble:
    """Forward-hazard HJM surface driven by the first ensemble component."""
    model = HjmMultiplicativeModel(ensemble.grid, ensemble.seed, params)
    rec = record_schedule(ensemble.grid, ensemble.n_paths, record, record_every)
    surf = run_surface(model, ensemble, rec, chunk)
    if surf.neg_count.size and np.all(surf.neg_count > 0):
        raise ModelError("negative forward hazards on every path")
    return surf


def simulate_hjm_additive(spec: AdditiveVolSpec, ensemble: PathEnsemble, record=None,
                          record_every=None, chunk: int = 256) -> DensitySurfaceEnsemble:
    """Density martingales d alpha_t(theta) = -z_t(theta) dW_t (Euler)."""
    model = HjmAdditiveModel(ensemble.grid, ensemble.seed, spec, ensemble.d)
    rec = record_schedule(ensemble.grid, ensemble.n_paths, record, record_every)
    return run_surface(model, ensemble, rec, chunk)


def simulate_cox(params: CoxParams, ensemble: PathEnsemble, record=None,
                 record_every=None, chunk: int = 256) -> DensitySurfaceEnsemble:
    """Cox surface: exact rows for theta <= t, nested estimates beyond."""
    model = CoxModel(ensemble.grid, ensemble.seed, params)
    rec = record_schedule(ensemble.grid, ensemble.n_paths, record, record_every)
    surf = run_surface(model, ensemble, rec, chunk)
    if surf.inner_se is not None:
        flagged = int((surf.inner_se > params.se_bound).sum())
        surf.params["inner_se_flagged"] = flagged
    return surf


def model_from_params(grid: TimeGrid, model_id: str, params: dict, seed: int) -> Optional[_Model]:
    """Rebuild a simulator from stored parameters (None for custom surfaces)."""
    if model_id == "constant":
        return ConstantHazardModel(grid, seed, params["lambda"], int(params.get("d", 1)))
    if model_id == "hjm_mult":
        return HjmMultiplicativeModel(grid, seed, HjmMultiplicativeParams(
            np.asarray(params["lambda0"]), np.asarray(params["b"])))
    if model_id == "cox":
        keys = {k: float(params[k]) for k in ("x0", "kappa", "mu", "sigma", "se_bound")}
        return CoxModel(grid, seed, CoxParams(m=int(params["m"]), **keys))
    if model_id == "hjm_add" and params.get("vol") == "step":
        a0 = DensityRow(np.asarray(params["alpha0"]), float(params["tail0"]), grid.dt)
        return HjmAdditiveModel(grid, seed, step_volatility(grid, params["c"], a0),
                                int(params.get("d", 1)))
    return None
