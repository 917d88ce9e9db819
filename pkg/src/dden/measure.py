"""Girsanov transforms of a density surface.

A change of measure is given by a pre-default process q_t and an
after-default family q_t(theta).  Families evaluate on a surface:

* ``pre(surface)``: q on the nodes, (n, N + 1);
* ``diag(surface)``: q_{t_k}(t_k), (n, N);
* ``past(surface, k)``: q_{t_k}(theta_j) for j < k, (n, k);
* ``integral(surface, bundle)``: sum_{j<k} q_{t_k}(theta_j) alpha_{t_k}(theta_j) dt
  on every node, or None when only recorded rows allow it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .decompositions import DecompositionBundle, _compensator_increments, doob_meyer
from .grid import ABSORB_TOL, ConfigError, DensityRow, integrate_cells, renormalize
from .models import DensitySurfaceEnsemble
from .verifier import MartingaleTestReport, cell_deviations, summarize_cells, test_constant_mean

IDENTITY_TOL = 1e-10
BOUNDARY_TOL = 1e-10


class MeasureChangeError(ValueError):
    """A change of measure failed validation or certification."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class TargetRejected(MeasureChangeError):
    """Boundary identity alpha*_theta(theta) = S*_theta lambda^F_theta violated."""

    def __init__(self, message, residuals, nodes):
        super().__init__(message, {"residuals": residuals.tolist(), "nodes": nodes.tolist()})
        self.residuals = residuals
        self.nodes = nodes


def _shifted_cumsum(x: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0], x.shape[1] + 1))
    np.cumsum(x, axis=1, out=out[:, 1:])
    return out


def _driver_exponential(surface, sigma, component):
    W = surface.driver(component)
    return np.exp(sigma * W - 0.5 * sigma ** 2 * surface.grid.nodes[None, :])


# ---------------------------------------------------------------------------
# families


class QFamily:
    name = "custom"
    identity = False

    def pre(self, surface) -> np.ndarray:
        return np.ones((surface.n_paths, surface.grid.N + 1))

    def diag(self, surface) -> np.ndarray:
        raise NotImplementedError

    def past(self, surface, k: int) -> np.ndarray:
        raise NotImplementedError

    def integral(self, surface, bundle) -> Optional[np.ndarray]:
        return None

    def params(self) -> dict:
        return {}


@dataclass
class ConstantFamily(QFamily):
    """q_t(theta) = c with q_t = 1, or q normalized so that Q^F = 1."""

    c: float = 1.0
    normalized: bool = False

    def __post_init__(self):
        if self.c <= 0:
            raise ConfigError("q must be positive")
        self.name = "constant"
        self.identity = self.c == 1.0

    def pre(self, surface):
        if not self.normalized:
            return np.ones((surface.n_paths, surface.grid.N + 1))
        S = surface.surv
        return (1.0 - self.c * (1.0 - S)) / S

    def diag(self, surface):
        return np.full((surface.n_paths, surface.grid.N), self.c)

    def past(self, surface, k):
        return np.full((surface.n_paths, k), self.c)

    def integral(self, surface, bundle):
        return self.c * (1.0 - surface.surv)

    def params(self):
        return {"c": self.c, "normalized": self.normalized}


class ImmersionFamily(QFamily):
    """q_t = 1/L^F_t and q_t(theta) = alpha_theta(theta) / (L^F_theta alpha_t(theta))."""

    name = "immersion"

    def __init__(self, bundle: DecompositionBundle):
        self.bundle = bundle

    def pre(self, surface):
        return 1.0 / self.bundle.L

    def diag(self, surface):
        # alpha_t(t) cancels on the diagonal, so q_t(t) = q_t bit for bit
        return 1.0 / self.bundle.L[:, :-1]

    def past(self, surface, k):
        a = surface.alpha_past(k)
        with np.errstate(divide="ignore", invalid="ignore"):
            return surface.diag_alpha[:, :k] / (self.bundle.L[:, :k] * a)

    def integral(self, surface, bundle):
        return _shifted_cumsum(surface.diag_alpha / self.bundle.L[:, :-1] * surface.grid.dt)


@dataclass
class ExponentialFamily(QFamily):
    """After-default family q_t(theta) = E_t / E_theta, E = exp(sigma W - sigma^2 t / 2)."""

    sigma: float
    component: int = 0

    def __post_init__(self):
        self.name = "exponential"
        self.identity = self.sigma == 0.0

    def _E(self, surface):
        return _driver_exponential(surface, self.sigma, self.component)

    def diag(self, surface):
        return np.ones((surface.n_paths, surface.grid.N))

    def past(self, surface, k):
        E = self._E(surface)
        return E[:, k:k + 1] / E[:, :k]

    def integral(self, surface, bundle):
        if not surface.immersed:
            return None
        E = self._E(surface)
        return E * _shifted_cumsum(surface.diag_alpha / E[:, :-1] * surface.grid.dt)

    def params(self):
        return {"sigma": self.sigma, "component": self.component}


@dataclass
class JumpAtDefaultFamily(QFamily):
    """Pure-jump density that multiplies by c at tau, compensated by exp(-(c-1) Lambda^F).

    The after-default value on a cell is the cell average of
    c exp(-(c - 1) Lambda_tau) under a uniform-in-cell default time.
    """

    c: float
    bundle: DecompositionBundle = field(repr=False, default=None)

    def __post_init__(self):
        if self.c <= 0:
            raise ConfigError("jump factor must be positive")
        self.name = "jump_at_default"
        self.identity = self.c == 1.0

    def pre(self, surface):
        return np.exp(-(self.c - 1.0) * self.bundle.Lam)

    def diag(self, surface):
        Lam = self.bundle.Lam[:, :-1]
        dL = self.bundle.dLam
        p = -np.expm1(-dL)
        avg = np.where(p > 0, -np.expm1(-self.c * dL) / (self.c * np.where(p > 0, p, 1.0)), 1.0)
        return self.c * np.exp(-(self.c - 1.0) * Lam) * avg

    def past(self, surface, k):
        return self.diag(surface)[:, :k]

    def integral(self, surface, bundle):
        if not surface.immersed:
            return None
        return _shifted_cumsum(self.diag(surface) * surface.diag_alpha * surface.grid.dt)

    def params(self):
        return {"c": self.c}


class TargetFamily(QFamily):
    """q = 1 and q_t(theta) = alpha*_t(theta) S_t / (alpha_theta(theta) S*_t)."""

    name = "target"

    def __init__(self, target: "DensityFamily", s_star: np.ndarray):
        self.target = target
        self.s_star = s_star

    def diag(self, surface):
        S = surface.surv[:, :-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.target.diag(surface) * S / (surface.diag_alpha * self.s_star[:, :-1])

    def past(self, surface, k):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.target.past(surface, k) * surface.surv[:, k:k + 1]
                    / (surface.diag_alpha[:, :k] * self.s_star[:, k:k + 1]))

    def integral(self, surface, bundle):
        I = self.target.integral(surface)
        if I is None:
            return None
        return surface.surv / self.s_star * I


class DensityFamily:
    """After-default density alpha*_t(theta), t >= theta."""

    def diag(self, surface) -> np.ndarray:
        raise NotImplementedError

    def past(self, surface, k: int) -> np.ndarray:
        raise NotImplementedError

    def integral(self, surface) -> Optional[np.ndarray]:
        """sum_{j<k} alpha*_{t_k}(theta_j) dt on every node, or None."""
        return None


@dataclass
class ArrayDensity(DensityFamily):
    """Explicit diagonal and past rows at selected nodes."""

    diag_values: np.ndarray
    rows: dict = field(default_factory=dict)
    integral_values: Optional[np.ndarray] = None

    def diag(self, surface):
        return self.diag_values

    def past(self, surface, k):
        if k not in self.rows:
            raise ConfigError(f"target density has no row at node {k}")
        return self.rows[k]

    def integral(self, surface):
        return self.integral_values


@dataclass
class MeasureChangeSpec:
    """Pre-default q with after-default q(theta); the boundary convention is recorded."""

    family: QFamily
    kind: str = "general"
    boundary: str = "q_theta(theta) as given by the family"

    @property
    def identity(self) -> bool:
        return self.family.identity

    def to_dict(self) -> dict:
        return {"family": self.family.name, "kind": self.kind, "boundary": self.boundary,
                "params": self.family.params()}


# ---------------------------------------------------------------------------
# changed model


@dataclass
class ChangedModel:
    """Closed-form quantities of the model under Q.

    ``qnodes`` are the nodes where Q^F (hence S^Q, L^{F,Q}) is available:
    every node when the family provides the projection integral, else the
    recorded rows.  Rows of alpha^Q for theta < t are computed on demand.
    """

    surface: DensitySurfaceEnsemble
    spec: MeasureChangeSpec
    bundle: DecompositionBundle
    qnodes: np.ndarray
    QF: np.ndarray
    SQ: np.ndarray
    LFQ: np.ndarray
    lamFQ: np.ndarray
    LamFQ: np.ndarray
    excluded: np.ndarray
    certification: dict = field(default_factory=dict)

    @property
    def every_node(self) -> bool:
        return self.qnodes.shape[0] == self.surface.grid.N + 1

    def qf_at(self, k: int) -> np.ndarray:
        i = int(np.searchsorted(self.qnodes, k))
        if i >= self.qnodes.shape[0] or self.qnodes[i] != k:
            raise ConfigError(f"Q^F is not available at node {k}")
        return self.QF[:, i]

    def alpha_q_diag(self) -> np.ndarray:
        """alpha^Q_t(t) = alpha_t(t) q_t(t) / Q^F_t on every node < N."""
        if not self.every_node:
            raise ConfigError("alpha^Q on the diagonal needs Q^F on every node")
        return self.surface.diag_alpha * self.spec.family.diag(self.surface) / self.QF[:, :-1]

    def alpha_q_past(self, k: int) -> np.ndarray:
        """alpha^Q_{t_k}(theta_j) = alpha q / Q^F for j < k."""
        if self.spec.identity:
            return self.surface.alpha_past(k).copy()
        return (self.surface.alpha_past(k) * self.spec.family.past(self.surface, k)
                / self.qf_at(k)[:, None])

    def immersion_metric(self) -> float:
        """max over recorded t and theta < t of |alpha^Q_t(theta) - alpha^Q_theta(theta)|."""
        d = self.alpha_q_diag()
        keep = ~self.excluded
        worst = 0.0
        for k in self.surface.record:
            k = int(k)
            if k == 0:
                continue
            diff = np.abs(self.alpha_q_past(k)[keep] - d[keep, :k])
            if diff.size:
                worst = max(worst, float(np.nanmax(diff)))
        return worst

    def initial_row(self) -> DensityRow:
        """Pooled alpha^Q_0(theta) = E[alpha_theta(theta) q_theta(theta)] (Q^F_0 = 1)."""
        keep = ~self.excluded
        v = self.surface.diag_alpha[keep] * self.spec.family.diag(self.surface)[keep]
        cells = v.mean(axis=0)
        g = self.surface.grid
        tail = 1.0 - float(cells.sum() * g.dt)
        return renormalize(DensityRow(cells, tail, g.dt))

    def as_target(self) -> ArrayDensity:
        """The transformed after-default density as a target family."""
        fam = self.spec.family
        I = fam.integral(self.surface, self.bundle)
        integral = None if I is None else I / self.QF
        rows = {int(k): self.alpha_q_past(int(k)) for k in self.surface.record if 0 < k}
        return ArrayDensity(self.alpha_q_diag(), rows, integral)

    def summary(self) -> dict:
        return {"spec": self.spec.to_dict(), "qnodes": int(self.qnodes.shape[0]),
                "excluded_paths": int(self.excluded.sum()), "certification": self.certification}


def _positive(x, what):
    finite = np.isfinite(x)
    if np.any(finite & (x <= 0)):
        raise MeasureChangeError(f"{what} must be positive")


def girsanov_transform(surface: DensitySurfaceEnsemble, spec: MeasureChangeSpec,
                       bundle: Optional[DecompositionBundle] = None, certify: bool = True,
                       threshold: float = 4.0) -> ChangedModel:
    """Apply Q^G = q_t 1{tau > t} + q_t(tau) 1{tau <= t} to the surface.

    Q^F_t = q_t S_t + int_0^t q_t(u) alpha_t(u) du, S^Q = q S / Q^F,
    lambda^{F,Q} = lambda^F q_t(t) / q_t and alpha^Q = alpha q / Q^F below
    the diagonal.  With ``certify`` the Q^F constant-mean test must pass.
    """
    bundle = doob_meyer(surface) if bundle is None else bundle
    g = surface.grid
    n, N, dt = surface.n_paths, g.N, g.dt
    fam = spec.family
    S = surface.surv
    if spec.identity:
        qnodes = np.arange(N + 1)
        QF = np.ones((n, N + 1))
        LamFQ = bundle.Lam.copy()
        return ChangedModel(surface, spec, bundle, qnodes, QF, S.copy(), bundle.L.copy(),
                            bundle.lamF.copy(), LamFQ, bundle.absorbed.copy(),
                            {"identity": True, "passed": True})
    pre = np.asarray(fam.pre(surface), dtype=float)
    dq = np.asarray(fam.diag(surface), dtype=float)
    if pre.shape != (n, N + 1) or dq.shape != (n, N):
        raise ConfigError("family returned arrays of the wrong shape")
    keep = ~bundle.absorbed
    _positive(pre[keep], "q")
    _positive(dq[keep], "q_t(t)")
    if np.any(np.abs(pre[keep, 0] - 1.0) > IDENTITY_TOL):
        raise MeasureChangeError("q_0 must equal 1")
    excluded = bundle.absorbed | ~np.all(np.isfinite(dq), axis=1) | ~np.all(np.isfinite(pre), axis=1)
    I = fam.integral(surface, bundle)
    if I is not None:
        qnodes = np.arange(N + 1)
    else:
        qnodes = surface.record.copy()
        I = np.zeros((n, qnodes.shape[0]))
        for i, k in enumerate(qnodes):
            k = int(k)
            if k == 0:
                continue
            qa = fam.past(surface, k) * surface.alpha_past(k)
            bad = ~np.all(np.isfinite(qa), axis=1)
            excluded |= bad
            _positive(qa[~excluded], "q_t(theta)")
            I[:, i] = np.where(bad, np.nan, qa.sum(axis=1) * dt)
    QF = pre[:, qnodes] * S[:, qnodes] + I
    excluded |= ~np.all(np.isfinite(QF), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        SQ = pre[:, qnodes] * S[:, qnodes] / QF
        lamFQ = bundle.lamF * dq / pre[:, :N]
    LamFQ = _shifted_cumsum(_compensator_increments(np.nan_to_num(lamFQ), dt))
    LFQ = SQ * np.exp(LamFQ[:, qnodes])
    del pre, dq, I
    cert = {}
    if certify:
        X = np.where(excluded[:, None], np.nan, QF)
        rep = test_constant_mean(X, "Q^F", qnodes * dt, threshold, surface.seed)
        cert = {"Q^F": rep.to_dict(), "passed": rep.ok}
        if not rep.ok:
            raise MeasureChangeError(
                f"Q^F failed the martingale certification (max deviation {rep.max_dev:.2f} SE)",
                cert)
    return ChangedModel(surface, spec, bundle, qnodes, QF, SQ, LFQ, lamFQ, LamFQ, excluded, cert)


def projection_quadrature(surface: DensitySurfaceEnsemble, spec: MeasureChangeSpec, k: int,
                          paths=None) -> np.ndarray:
    """Q^F at node k by per-path cell quadrature of the stored rows."""
    g = surface.grid
    paths = np.arange(surface.n_paths) if paths is None else np.asarray(paths)
    fam = spec.family
    pre = fam.pre(surface)[:, k]
    cells, tails = surface.row_at(paths, k)
    w = np.zeros(g.N)
    out = np.empty(paths.shape[0])
    past = fam.past(surface, k) if k > 0 else np.zeros((surface.n_paths, 0))
    for i, p in enumerate(paths):
        row = DensityRow(cells[i], float(tails[i]), g.dt)
        w[:k] = past[p]
        S_k = integrate_cells(row, k * g.dt, g.T_max) + row.tail
        out[i] = pre[p] * S_k + integrate_cells(row, 0.0, k * g.dt, w)
    return out


def immersion_change(surface: DensitySurfaceEnsemble,
                     bundle: Optional[DecompositionBundle] = None):
    """Change to a measure under which the immersion property holds.

    Surfaces with L^F = 1 already satisfy it and get the identity spec.
    """
    bundle = doob_meyer(surface) if bundle is None else bundle
    keep = ~bundle.absorbed
    if not keep.any() or np.max(np.abs(bundle.L[keep] - 1.0)) <= IDENTITY_TOL:
        spec = MeasureChangeSpec(ConstantFamily(1.0), "immersion", "identity (L^F = 1)")
    else:
        spec = MeasureChangeSpec(ImmersionFamily(bundle), "immersion",
                                 "q_theta(theta) = q_theta = 1/L^F_theta")
    return spec, girsanov_transform(surface, spec, bundle)


def after_default_change(surface: DensitySurfaceEnsemble, family: QFamily,
                         bundle: Optional[DecompositionBundle] = None,
                         threshold: float = 4.0, cell_fraction: float = 0.95) -> ChangedModel:
    """Change that leaves the law up to tau unchanged (q = 1, q_theta(theta) = 1).

    Certifies that S/S^Q and alpha^Q_t(theta) S_t / S^Q_t (t >= theta) have
    constant means; the latter is tested per recorded (t, theta) cell.
    """
    bundle = doob_meyer(surface) if bundle is None else bundle
    n, N = surface.n_paths, surface.grid.N
    pre = family.pre(surface)
    dq = family.diag(surface)
    keep = ~bundle.absorbed
    if np.max(np.abs(pre[keep] - 1.0)) > IDENTITY_TOL:
        raise MeasureChangeError("after-default changes need q = 1 before default")
    bad = np.abs(dq[keep] - 1.0) > IDENTITY_TOL
    if np.any(bad):
        nodes = np.unique(np.nonzero(bad)[1])
        raise MeasureChangeError(f"boundary q_theta(theta) = 1 violated at {nodes.size} nodes",
                                 {"nodes": nodes.tolist()})
    spec = MeasureChangeSpec(family, "after_default", "q_theta(theta) = 1")
    ch = girsanov_transform(surface, spec, bundle, certify=True, threshold=threshold)
    if spec.identity:
        return ch
    dt = surface.grid.dt
    keep = ~ch.excluded
    ratio = np.where(keep[:, None], surface.surv[:, ch.qnodes] / ch.SQ, np.nan)
    rep1 = test_constant_mean(ratio, "S/S^Q", ch.qnodes * dt, threshold, surface.seed)
    devs = []
    for k in surface.record:
        k = int(k)
        if k == 0:
            continue
        # alpha^Q S / S^Q = alpha q; compare with its value alpha_theta(theta) at t = theta
        x = surface.alpha_past(k) * family.past(surface, k)
        devs.append(cell_deviations(np.where(keep[:, None], x - surface.diag_alpha[:, :k], np.nan)))
    stat = summarize_cells(devs, threshold)
    passed2 = stat["pass_fraction"] >= cell_fraction
    ch.certification.update({"S/S^Q": rep1.to_dict(), "alphaQ*S/S^Q": stat,
                             "passed": bool(ch.certification.get("passed", True) and rep1.ok and passed2)})
    if not (rep1.ok and passed2):
        raise MeasureChangeError("after-default martingale conditions failed", ch.certification)
    return ch


def target_density_change(surface: DensitySurfaceEnsemble, target: DensityFamily,
                          bundle: Optional[DecompositionBundle] = None,
                          tol: float = BOUNDARY_TOL, threshold: float = 4.0):
    """Change of measure after which the after-default density is ``target``.

    Returns (changed model, validity report).  Raises TargetRejected with
    per-node residuals when alpha*_theta(theta) != S*_theta lambda^F_theta.
    """
    bundle = doob_meyer(surface) if bundle is None else bundle
    g = surface.grid
    n, N, dt = surface.n_paths, g.N, g.dt
    I = target.integral(surface)
    if I is None:
        raise ConfigError("target density must provide its running integral on every node")
    s_star = 1.0 - I
    keep = ~bundle.absorbed
    if np.any(s_star[keep] <= ABSORB_TOL):
        raise MeasureChangeError("target survival S* must stay positive")
    resid = np.abs(target.diag(surface) - s_star[:, :N] * bundle.lamF)
    resid = np.where(keep[:, None], resid, 0.0)
    per_node = resid.max(axis=0)
    bad_nodes = np.flatnonzero(per_node > tol)
    report = {"boundary_max_residual": float(per_node.max()), "tolerance": tol,
              "violating_nodes": bad_nodes.tolist()}
    if bad_nodes.size:
        raise TargetRejected(
            f"boundary identity violated at {bad_nodes.size} node(s), first at t={bad_nodes[0] * dt:g} "
            f"(residual {per_node[bad_nodes[0]]:.3e})", per_node[bad_nodes], bad_nodes)
    ratio = np.where(keep[:, None], surface.surv / s_star, np.nan)
    rep = test_constant_mean(ratio, "S/S*", g.nodes, threshold, surface.seed)
    report["S/S*"] = rep.to_dict()
    del resid, ratio
    if not rep.ok:
        raise MeasureChangeError("S/S* failed the martingale test", report)
    spec = MeasureChangeSpec(TargetFamily(target, s_star), "target",
                             "q_theta(theta) = alpha*_theta(theta) S_theta / (alpha_theta(theta) S*_theta)")
    ch = girsanov_transform(surface, spec, bundle, certify=True, threshold=threshold)
    diff = np.abs(ch.SQ - s_star[:, ch.qnodes])
    report["max_abs_SQ_minus_Sstar"] = float(np.max(diff[~ch.excluded])) if (~ch.excluded).any() else 0.0
    lam_diff = np.abs(ch.lamFQ - bundle.lamF)[~ch.excluded]
    report["max_abs_lamFQ_minus_lamF"] = float(lam_diff.max()) if lam_diff.size else 0.0
    ch.certification.update(report)
    return ch, report
