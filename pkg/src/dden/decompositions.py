"""Additive and multiplicative decompositions of the survival process,
intensities, compensated jump martingales at tau, the G-decomposition of
F-martingales and the G-martingale characterization checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .grid import ABSORB_TOL, ConfigError
from .models import DensitySurfaceEnsemble
from .verifier import (DefaultSample, MartingaleTestReport, TestDictionary, test_constant_mean)

# largest per-cell default probability fed to log1p
_P_MAX = 1.0 - 1e-16


@dataclass
class DecompositionBundle:
    """Per-path pieces of S = 1 + M^F - A^F = L^F exp(-Lambda^F) on the nodes.

    ``lamF`` is alpha_t(t)/S_t on the cells, frozen after absorption.
    Lambda^F increases by -ln(1 - lamF dt) per cell, the exact integral of
    the within-cell hazard of a density that is uniform on the cell.
    """

    M: np.ndarray
    A: np.ndarray
    L: np.ndarray
    Lam: np.ndarray
    lamF: np.ndarray
    zeta_F: np.ndarray
    absorbed: np.ndarray

    @property
    def dLam(self) -> np.ndarray:
        return np.diff(self.Lam, axis=1)


def _compensator_increments(lamF: np.ndarray, dt: float) -> np.ndarray:
    p = np.clip(lamF * dt, 0.0, _P_MAX)
    return -np.log1p(-p)


def doob_meyer(surface: DensitySurfaceEnsemble) -> DecompositionBundle:
    g = surface.grid
    n, N, dt = surface.n_paths, g.N, g.dt
    S = surface.surv
    diag = surface.diag_alpha
    A = np.zeros((n, N + 1))
    np.cumsum(diag * dt, axis=1, out=A[:, 1:])
    M = S - 1.0 + A
    Sl = S[:, :N]
    lamF = np.where(Sl > ABSORB_TOL, diag / np.where(Sl > ABSORB_TOL, Sl, 1.0), 0.0)
    absorbed = surface.absorbed
    for p in np.flatnonzero(absorbed):
        z = int(surface.zeta_F[p])
        if z < N:
            lamF[p, z:] = lamF[p, z - 1] if z > 0 else 0.0
    Lam = np.zeros((n, N + 1))
    np.cumsum(_compensator_increments(lamF, dt), axis=1, out=Lam[:, 1:])
    L = S * np.exp(Lam)
    return DecompositionBundle(M, A, L, Lam, lamF, surface.zeta_F.copy(), absorbed)


def identity_residuals(surface: DensitySurfaceEnsemble, bundle: DecompositionBundle) -> dict:
    """Largest pathwise violations of the additive and multiplicative identities."""
    S = surface.surv
    keep = ~bundle.absorbed
    add = np.abs(S - (1.0 + bundle.M - bundle.A))
    mult = np.abs(S - bundle.L * np.exp(-bundle.Lam))
    return {"additive": float(add.max()) if add.size else 0.0,
            "multiplicative": float(mult[keep].max()) if keep.any() else 0.0}


def g_intensity(bundle: DecompositionBundle, sample: DefaultSample, k: int, draw: int = 0) -> np.ndarray:
    """lambda^G at node k: 1{tau > t_k} lambda^F_{t_k}, per path."""
    if not 0 <= k < bundle.lamF.shape[1]:
        raise ConfigError("intensity is defined on nodes 0..N-1")
    return np.where(sample.cell[:, draw] >= k, bundle.lamF[:, k], 0.0)


def pooled_g_intensity(bundle: DecompositionBundle, sample: DefaultSample) -> np.ndarray:
    """Per-path mean over draws of lambda^G at every node k < N, shape (n, N)."""
    N = bundle.lamF.shape[1]
    alive = np.zeros((sample.cell.shape[0], N))
    ks = np.arange(N)
    for d in range(sample.n_draws):
        alive += sample.cell[:, d][:, None] >= ks[None, :]
    return bundle.lamF * alive / sample.n_draws


@dataclass
class JumpMartingalePath:
    """Trajectories on the nodes (n_paths, N + 1) for one draw of tau."""

    NG: np.ndarray
    NHG: Optional[np.ndarray] = None
    UG: Optional[np.ndarray] = None


def _node_process(x, n, N1, what):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = np.full(N1, float(x))
    if x.ndim == 1:
        if x.shape[0] != N1:
            raise ConfigError(f"{what} must have one value per node")
        x = np.broadcast_to(x, (n, N1))
    if x.shape != (n, N1):
        raise ConfigError(f"{what} must have shape (n_paths, N + 1)")
    return x


def _stopped_integral(weight_nodes, dLam, cell, frac, dt):
    """int_0^{t ^ tau} h dLambda on the nodes, with h linear inside cells.

    Full cells use the cell-average weight; the partial cell of tau uses
    the weight averaged between the cell start and tau, times the exact
    partial compensator -ln(1 - p frac).
    """
    n, N = dLam.shape
    h_bar = 0.5 * (weight_nodes[:, :-1] + weight_nodes[:, 1:])
    cum = np.zeros((n, N + 1))
    np.cumsum(h_bar * dLam, axis=1, out=cum[:, 1:])
    c = np.minimum(cell, N - 1)
    inside = cell < N
    p = -np.expm1(-np.take_along_axis(dLam, c[:, None], axis=1)[:, 0])
    part_lam = -np.log1p(-np.clip(p * frac, 0.0, _P_MAX))
    h_c = np.take_along_axis(weight_nodes, c[:, None], axis=1)[:, 0]
    h_c1 = np.take_along_axis(weight_nodes, (c + 1)[:, None], axis=1)[:, 0]
    h_tau = h_c + frac * (h_c1 - h_c)
    at_tau = np.take_along_axis(cum, c[:, None], axis=1)[:, 0] + 0.5 * (h_c + h_tau) * part_lam
    ks = np.arange(N + 1)
    after = inside[:, None] & (ks[None, :] > cell[:, None])
    return np.where(after, at_tau[:, None], cum), h_tau, after


def build_jump_martingales(surface: DensitySurfaceEnsemble, bundle: DecompositionBundle,
                           sample: DefaultSample, H=None, u=None, draw: int = 0) -> JumpMartingalePath:
    """N^G, and optionally N^{H,G} and U^G, for draw ``draw`` of tau.

    ``H`` and ``u`` are node values, scalar, (N + 1,) or (n_paths, N + 1),
    linearly interpolated inside cells.
    """
    g = surface.grid
    n, N = surface.n_paths, g.N
    cell = sample.cell[:, draw]
    frac = sample.frac[:, draw]
    dLam = bundle.dLam
    one = np.ones((n, N + 1))
    comp, _, after = _stopped_integral(one, dLam, cell, frac, g.dt)
    NG = after.astype(float) - comp
    NHG = UG = None
    if H is not None:
        Hn = _node_process(H, n, N + 1, "H")
        compH, H_tau, after = _stopped_integral(Hn, dLam, cell, frac, g.dt)
        NHG = np.where(after, H_tau[:, None], 0.0) - compH
    if u is not None:
        un = _node_process(u, n, N + 1, "u")
        if np.any(un <= 0):
            raise ConfigError("u must be positive")
        compU, u_tau, after = _stopped_integral(un - 1.0, dLam, cell, frac, g.dt)
        u_tau = u_tau + 1.0
        UG = np.where(after, u_tau[:, None], 1.0) * np.exp(-compU)
    return JumpMartingalePath(NG, NHG, UG)


@dataclass
class FDecomposition:
    """Pieces of Y = M^{Y,G} + A^{Y,G} for one draw of tau."""

    A: np.ndarray
    A_tau: np.ndarray
    AG: np.ndarray
    residual: np.ndarray
    flagged: np.ndarray


def f_mart_decomposition(surface: DensitySurfaceEnsemble, bundle: DecompositionBundle,
                         sample: DefaultSample, Y: np.ndarray, draw: int = 0,
                         column: Optional[np.ndarray] = None) -> FDecomposition:
    """A_t = sum dY dM^F / S and A_t(tau) = sum dY d alpha(tau) / alpha(tau).

    Realized covariations are increment products on the nodes.  The
    covariation with S is taken against its martingale part M^F, since the
    continuous finite-variation part A^F carries no covariation.
    A^{Y,G} equals A before tau and A_tau + A_t(tau) after it, so it has
    is continuous at tau; the post-default sum starts on tau's cell.
    ``column`` (n, N + 1) holds alpha_s(theta_c) on tau's cell c and is
    replayed from the surface when omitted.
    """
    g = surface.grid
    n, N = surface.n_paths, g.N
    Y = _node_process(Y, n, N + 1, "Y")
    cell = sample.cell[:, draw]
    dY = np.diff(Y, axis=1)
    S = surface.surv[:, :N]
    good = S > ABSORB_TOL
    dM = np.diff(bundle.M, axis=1)
    A = np.zeros((n, N + 1))
    np.cumsum(np.where(good, dY * dM / np.where(good, S, 1.0), 0.0), axis=1, out=A[:, 1:])
    inside = cell < N
    if column is None:
        column = surface.columns(np.minimum(cell, N - 1))[:, 0]
    ks = np.arange(N)
    a_s = column[:, :N]
    da = np.diff(column, axis=1)
    active = inside[:, None] & (ks[None, :] >= cell[:, None])
    ok_a = a_s > ABSORB_TOL
    flagged = np.any(active & ~ok_a, axis=1) | bundle.absorbed
    terms = np.where(active & ok_a, dY * da / np.where(ok_a, a_s, 1.0), 0.0)
    A_tau = np.zeros((n, N + 1))
    np.cumsum(terms, axis=1, out=A_tau[:, 1:])
    defaulted = inside[:, None] & (np.arange(N + 1)[None, :] > cell[:, None])
    # continuous at tau: post-default part starts from A at tau's cell
    A_at = np.take_along_axis(A, np.minimum(cell, N)[:, None], axis=1)
    AG = np.where(defaulted, A_at + A_tau, A)
    return FDecomposition(A, A_tau, AG, Y - AG, flagged)


def g_orthogonality(X: np.ndarray, sample: DefaultSample, W: np.ndarray, s_nodes: Sequence[int],
                    t_node: int, dt: float, draw: int = 0, threshold: float = 4.0) -> list:
    """E[(X_t - X_s) g(G_s)] ~ 0 for G_s-measurable g.

    The dictionary is {1{tau > s}, 1{tau <= s}, W_s 1{tau > s} / sqrt(s)}.
    """
    from .verifier import _standardized

    cell = sample.cell[:, draw]
    out = []
    for s in s_nodes:
        if not s < t_node:
            continue
        alive = (cell >= s).astype(float)
        funcs = {"alive": alive, "dead": 1.0 - alive,
                 "W_alive": alive * W[:, s] / np.sqrt(max(s * dt, 1e-300))}
        inc = X[:, t_node] - X[:, s]
        for name, gv in funcs.items():
            mean, se, dev = _standardized((inc * gv)[:, None], threshold)
            out.append({"function": name, "s": int(s), "t": int(t_node), "estimate": float(mean[0]),
                        "se": float(se[0]), "dev": float(dev[0]), "passed": bool(dev[0] <= threshold)})
    return out


class PostDefault:
    """After-default family Y_t(theta); subclasses give values on the grid."""

    def diag(self, surface) -> np.ndarray:
        """Y_{t_k}(t_k) for k < N, shape (n, N)."""
        raise NotImplementedError

    def values(self, surface, j: int, ks: np.ndarray) -> np.ndarray:
        """Y_{t_k}(theta_j) for the nodes ``ks``, shape (n, len(ks))."""
        raise NotImplementedError


@dataclass
class ConstantPostDefault(PostDefault):
    c: float

    def diag(self, surface):
        return np.full((surface.n_paths, surface.grid.N), float(self.c))

    def values(self, surface, j, ks):
        return np.full((surface.n_paths, len(ks)), float(self.c))


@dataclass
class GMartingaleReport:
    condition1: MartingaleTestReport
    condition2: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.condition1.ok and all(r.ok for r in self.condition2)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "condition1": self.condition1.to_dict(),
                "condition2": [r.to_dict() for r in self.condition2]}


def verify_G_martingale(surface: DensitySurfaceEnsemble, Y, Ytheta: Union[float, PostDefault],
                        thetas: Optional[Sequence[int]] = None, columns: Optional[np.ndarray] = None,
                        threshold: float = 4.0) -> GMartingaleReport:
    """Check the two F-martingale conditions characterizing a G-martingale.

    Condition 1: Y_t S_t + int_0^t Y_s(s) alpha_s(s) ds.
    Condition 2: Y_t(theta) alpha_t(theta), t >= theta, for each cell in
    ``thetas`` (default: four cells spread over the horizon).  Absorbed
    paths are excluded.
    """
    g = surface.grid
    n, N, dt = surface.n_paths, g.N, g.dt
    post = ConstantPostDefault(Ytheta) if np.isscalar(Ytheta) else Ytheta
    Yn = _node_process(Y, n, N + 1, "Y")
    integral = np.zeros((n, N + 1))
    np.cumsum(post.diag(surface) * surface.diag_alpha * dt, axis=1, out=integral[:, 1:])
    X1 = Yn * surface.surv + integral
    X1 = np.where(surface.absorbed[:, None], np.nan, X1)
    rep1 = test_constant_mean(X1, "condition1", g.nodes, threshold, surface.seed)
    if thetas is None:
        thetas = [0, N // 4, N // 2, (3 * N) // 4]
    thetas = [int(j) for j in thetas]
    if columns is None:
        columns = surface.columns(np.tile(np.asarray(thetas, dtype=np.int64), (n, 1)))
    reps = []
    for c, j in enumerate(thetas):
        ks = np.arange(j, N + 1)
        X2 = post.values(surface, j, ks) * columns[:, c, j:]
        X2 = np.where(surface.absorbed[:, None], np.nan, X2)
        reps.append(test_constant_mean(X2, f"condition2[theta={j * dt:g}]", ks * dt,
                                       threshold, surface.seed))
    return GMartingaleReport(rep1, reps)
