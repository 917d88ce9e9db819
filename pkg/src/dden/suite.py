"""Acceptance criteria and per-surface identity checks.

``run_acceptance`` evaluates the thirteen acceptance criteria at a chosen
scale.  Surfaces are built one at a time and released once their checks
are done, so the reference scale fits in a few GB of memory.
"""
from __future__ import annotations

import gc
import hashlib
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import io
from .calculus import linear_capped, price_bd, survival_claim, unit_payoff
from .decompositions import (build_jump_martingales, doob_meyer, f_mart_decomposition,
                             g_orthogonality, identity_residuals, pooled_g_intensity,
                             verify_G_martingale)
from .grid import TimeGrid, gaussian_ensemble
from .measure import (ConstantFamily, ExponentialFamily, MeasureChangeError, MeasureChangeSpec,
                      TargetRejected, after_default_change, girsanov_transform, immersion_change,
                      projection_quadrature, target_density_change)
from .models import (MAX_ADJUSTMENT, CoxParams, DensitySurfaceEnsemble, HjmMultiplicativeParams,
                     build_constant_hazard, exponential_row, simulate_cox, simulate_hjm_additive,
                     simulate_hjm_multiplicative, step_volatility)
from .verifier import (cell_deviations, pricing_cross_check, sample_default,
                       summarize_cells, test_constant_mean)

EXACT = 1e-10

NAMES = {
    1: "normalization",
    2: "density martingale",
    3: "Doob-Meyer identities",
    4: "intensity-density link",
    5: "compensated jump martingales",
    6: "pricing cross-check",
    7: "immersion change",
    8: "Girsanov projection",
    9: "after-default change",
    10: "target-density change",
    11: "G-decomposition",
    12: "negative controls",
    13: "reproducibility",
}


@dataclass
class SuiteConfig:
    """Scale and model settings of the acceptance run (reference defaults)."""

    T_max: float = 10.0
    N: int = 1000
    n_paths: int = 20000
    seed: int = 20240917
    hjm_lambda0: float = 0.2
    hjm_b: float = -0.1
    hjm_record_every: int = 250
    cox_x0: float = math.log(0.2)
    cox_kappa: float = 1.0
    cox_mu: float = math.log(0.2)
    cox_sigma: float = 0.3
    cox_m: int = 16
    cox_record_every: int = 500
    const_lambda: float = 0.2
    additive_paths: int = 2000
    additive_c: float = 0.002
    change_sigma_const: float = 0.2
    change_sigma_cox: float = 0.3
    payoff_T: float = 5.0
    threshold: float = 4.0
    price_threshold: float = 3.0
    link_threshold: float = 3.0
    cell_fraction: float = 0.95
    drift: float = 0.1
    target_node_fraction: float = 0.37
    target_bump: float = 1.01

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T_max, self.N)

    @classmethod
    def small(cls, **kw) -> "SuiteConfig":
        """Reduced scale for quick runs and unit tests."""
        base = dict(N=200, n_paths=4000, hjm_record_every=50, cox_record_every=100, cox_m=8,
                    additive_paths=500)
        base.update(kw)
        return cls(**base)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool = True
    parts: List[dict] = field(default_factory=list)
    seconds: float = 0.0

    def add(self, check: str, passed: bool, **values) -> bool:
        self.parts.append({"check": check, "passed": bool(passed), **values})
        self.passed = self.passed and bool(passed)
        return bool(passed)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        failed = [p["check"] for p in self.parts if not p["passed"]]
        tail = f" (failed: {'; '.join(failed)})" if failed else ""
        return f"criterion {self.number:2d} [{status}] {self.name}{tail}"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# builders


def build_hjm(cfg: SuiteConfig) -> DensitySurfaceEnsemble:
    g = cfg.grid
    ens = gaussian_ensemble(g, cfg.n_paths, 1, cfg.seed)
    params = HjmMultiplicativeParams.flat(g, cfg.hjm_lambda0, cfg.hjm_b)
    return simulate_hjm_multiplicative(params, ens, record_every=cfg.hjm_record_every)


def build_cox(cfg: SuiteConfig) -> DensitySurfaceEnsemble:
    g = cfg.grid
    ens = gaussian_ensemble(g, cfg.n_paths, 1, cfg.seed + 1)
    params = CoxParams(cfg.cox_x0, cfg.cox_kappa, cfg.cox_mu, cfg.cox_sigma, cfg.cox_m)
    return simulate_cox(params, ens, record_every=cfg.cox_record_every)


def build_constant(cfg: SuiteConfig) -> DensitySurfaceEnsemble:
    return build_constant_hazard(cfg.const_lambda, cfg.grid, cfg.n_paths, cfg.seed + 2,
                                 record_every=cfg.hjm_record_every)


def build_additive(cfg: SuiteConfig) -> DensitySurfaceEnsemble:
    g = cfg.grid
    ens = gaussian_ensemble(g, cfg.additive_paths, 1, cfg.seed + 3)
    spec = step_volatility(g, cfg.additive_c, exponential_row(g, cfg.const_lambda))
    return simulate_hjm_additive(spec, ens, record_every=cfg.hjm_record_every)


def drifted_surface(grid: TimeGrid, n_paths: int, seed: int = 0, lam0: float = 0.2,
                    slope: float = 0.05) -> DensitySurfaceEnsemble:
    """Negative-control fixture: deterministic rows Exp(lam0 + slope t).

    Each row is a valid density, but the rows drift with t, so neither the
    cells nor the survival decomposition are martingales.
    """
    N = grid.N
    record = np.arange(0, N + 1, max(1, N // 10))
    if record[-1] != N:
        record = np.append(record, N)
    lam = lam0 + slope * grid.nodes
    rows = [exponential_row(grid, lam[k]) for k in range(N + 1)]
    alpha = np.broadcast_to(np.stack([rows[k].cells for k in record]), (n_paths, len(record), N))
    tail = np.broadcast_to(np.array([rows[k].tail for k in record]), (n_paths, len(record)))
    diag = np.broadcast_to(np.array([rows[k].cells[k] for k in range(N)]), (n_paths, N))
    surv = np.broadcast_to(np.exp(-lam * grid.nodes), (n_paths, N + 1))
    return DensitySurfaceEnsemble(
        grid, "custom", {"fixture": "drifted", "lambda0": lam0, "slope": slope}, int(seed),
        record.astype(np.int64), np.array(alpha), np.array(tail), np.array(diag), np.array(surv),
        np.full(n_paths, N + 1, dtype=np.int64), np.zeros((n_paths, len(record))),
        np.zeros(n_paths, dtype=np.int64), None, 1, None, None)


# ---------------------------------------------------------------------------
# shared checks


def normalization_check(surface: DensitySurfaceEnsemble) -> dict:
    res = float(np.max(np.abs(surface.alpha.sum(axis=2) * surface.grid.dt + surface.tail - 1.0)))
    neg = bool(np.any(surface.alpha < 0) or np.any(surface.tail < 0))
    adj = float(surface.adjust.max()) if surface.adjust.size else 0.0
    return {"residual": res, "negative_entries": neg, "max_adjustment": adj,
            "passed": res <= EXACT and not neg and adj <= MAX_ADJUSTMENT}


def density_cells_check(surface: DensitySurfaceEnsemble, threshold: float) -> dict:
    devs = [cell_deviations(surface.alpha[:, r], surface.alpha[:, 0])
            for r in range(1, surface.record.shape[0])]
    return summarize_cells(devs, threshold)


def _max_abs(x, mask=None) -> float:
    x = np.abs(np.asarray(x))
    if mask is not None:
        x = x[mask]
    return float(np.max(x)) if x.size else 0.0


def surface_identity_suite(surface: DensitySurfaceEnsemble, threshold: float = 4.0,
                           cell_fraction: float = 0.95, price_threshold: float = 3.0) -> dict:
    """Every identity that a single surface must satisfy, with pass flags."""
    checks = {}
    checks["normalization"] = normalization_check(surface)
    b = doob_meyer(surface)
    res = identity_residuals(surface, b)
    checks["doob_meyer_additive"] = {"residual": res["additive"], "passed": res["additive"] <= EXACT}
    checks["doob_meyer_multiplicative"] = {"residual": res["multiplicative"],
                                           "passed": res["multiplicative"] <= EXACT}
    keep = ~b.absorbed
    times = surface.grid.nodes
    for name, X in (("M_F_martingale", b.M), ("L_F_martingale", b.L)):
        rep = test_constant_mean(np.where(keep[:, None], X, np.nan), name, times, threshold,
                                 surface.seed)
        checks[name] = {"max_dev": rep.max_dev, "exact": rep.exact, "passed": rep.ok}
    cells = density_cells_check(surface, threshold)
    cells["passed"] = cells["pass_fraction"] >= cell_fraction
    checks["density_martingale_cells"] = cells
    T = surface.grid.nodes[surface.grid.N // 2]
    for payoff in (unit_payoff(T), survival_claim(T)):
        r = pricing_cross_check(surface, payoff, threshold=price_threshold)
        checks[f"pricing_{payoff.name}"] = r
    failed = sorted(k for k, v in checks.items() if not v["passed"])
    return {"provenance": io.provenance(surface), "checks": checks, "failed": failed,
            "passed": not failed}


# ---------------------------------------------------------------------------
# per-surface phases


def _hjm_phase(cfg: SuiteConfig, R: Dict[int, CriterionResult], log: Callable) -> str:
    g = cfg.grid
    th = cfg.threshold
    s = build_hjm(cfg)
    log(f"  hjm surface built: {s.n_paths} paths, rows at {s.record.tolist()}")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "hjm.bin")
        io.write_surface(s, path)
        digest = io.file_digest(path)

    R[1].add("hjm_mult rows", **normalization_check(s))
    cells = density_cells_check(s, th)
    R[2].add(f"hjm cells within {th:g} SE", cells["pass_fraction"] >= cfg.cell_fraction, **cells)

    b = doob_meyer(s)
    res = identity_residuals(s, b)
    R[3].add("hjm S = 1 + M - A", res["additive"] <= EXACT, residual=res["additive"])
    R[3].add("hjm S = L exp(-Lambda)", res["multiplicative"] <= EXACT, residual=res["multiplicative"])
    keep = ~b.absorbed
    for name, X in (("M^F", b.M), ("L^F", b.L)):
        rep = test_constant_mean(np.where(keep[:, None], X, np.nan), name, g.nodes, th, s.seed)
        R[3].add(f"hjm {name} constant mean", rep.ok, max_dev=rep.max_dev)

    smp = sample_default(s)
    lg = pooled_g_intensity(b, smp)
    link = summarize_cells([cell_deviations(lg, s.alpha[0, 0][None, :])], cfg.link_threshold)
    del lg
    R[4].add(f"hjm pooled lambda^G vs alpha_0 within {cfg.link_threshold:g} SE",
             link["pass_fraction"] >= cfg.cell_fraction, **link)

    jm = build_jump_martingales(s, b, smp, H=g.nodes, u=1.0)
    for name, X in (("N^G", jm.NG), ("N^{H,G}", jm.NHG)):
        rep = test_constant_mean(X, name, g.nodes, cfg.link_threshold, s.seed)
        R[5].add(f"hjm E[{name}] = 0 within {cfg.link_threshold:g} SE", rep.ok, max_dev=rep.max_dev)
    ug = _max_abs(jm.UG - 1.0)
    R[5].add("hjm U^G (u = 1) identically 1", ug <= EXACT, max_abs=ug)
    del jm

    _pricing(cfg, s, "hjm", R[6])

    spec, ch = immersion_change(s, b)
    metric = ch.immersion_metric()
    lam = _max_abs(ch.lamFQ - b.lamF, ~ch.excluded)
    R[7].add("hjm immersion metric", metric <= EXACT, value=metric)
    R[7].add("hjm lambda^{F,Q} = lambda^F", lam <= EXACT, value=lam)
    _projection(s, spec, ch, "hjm immersion", R[8])
    del ch
    gc.collect()

    W = s.driver(0)
    fd = f_mart_decomposition(s, b, smp, W)
    mask = ~fd.flagged
    rep = test_constant_mean(np.where(mask[:, None], fd.residual, np.nan), "W - A^{Y,G}",
                             g.nodes, th, s.seed)
    R[11].add(f"hjm W - A^(Y,G) constant mean within {th:g} SE", rep.ok, max_dev=rep.max_dev,
              flagged_paths=int(fd.flagged.sum()))
    s_nodes = [int(k) for k in s.record if 0 < k < g.N]
    orth = g_orthogonality(np.where(mask[:, None], fd.residual, np.nan), smp, W, s_nodes, g.N, g.dt,
                           threshold=th)
    R[11].add("hjm W - A^(Y,G) G-orthogonal increments", all(o["passed"] for o in orth),
              max_dev=max((o["dev"] for o in orth), default=0.0))
    del fd

    drifted = W + cfg.drift * g.nodes[None, :]
    rep = test_constant_mean(drifted, "W + drift t", g.nodes, th, s.seed)
    R[12].add(f"W + {cfg.drift:g} t rejected", not rep.ok, max_dev=rep.max_dev)
    rep = test_constant_mean(np.broadcast_to(g.nodes, W.shape), "t", g.nodes, th, s.seed)
    R[12].add("deterministic X_t = t rejected", not rep.ok, max_dev=rep.max_dev)
    return digest


def _pricing(cfg: SuiteConfig, s, label: str, result: CriterionResult):
    T = cfg.payoff_T
    for payoff in (unit_payoff(T), survival_claim(T), linear_capped(T, cfg.T_max)):
        r = pricing_cross_check(s, payoff, threshold=cfg.price_threshold)
        result.add(f"{label} {payoff.name}", r["passed"], density=r["density_price"],
                   sampled=r["sampled_price"], abs_diff=r["abs_diff"], combined_se=r["combined_se"])


def _projection(s, spec, ch, label: str, result: CriterionResult, max_paths: int = 4000):
    paths = np.arange(min(s.n_paths, max_paths))
    worst = 0.0
    for k in s.record:
        k = int(k)
        q = projection_quadrature(s, spec, k, paths)
        worst = max(worst, _max_abs(ch.qf_at(k)[paths] - q, ~ch.excluded[paths]))
    result.add(f"{label} Q^F projection = quadrature", worst <= EXACT, max_abs=worst,
               paths=int(paths.shape[0]), nodes=s.record.tolist())


def _cox_phase(cfg: SuiteConfig, R: Dict[int, CriterionResult], log: Callable) -> str:
    g = cfg.grid
    s = build_cox(cfg)
    log(f"  cox surface built: {s.n_paths} paths, rows at {s.record.tolist()}")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "cox.bin")
        io.write_surface(s, path)
        digest = io.file_digest(path)
    R[1].add("cox rows", **normalization_check(s))
    b = doob_meyer(s)
    res = identity_residuals(s, b)
    R[3].add("cox identities", max(res.values()) <= EXACT, **res)
    R[3].add("cox M^F = 0", _max_abs(b.M) <= EXACT, max_abs=_max_abs(b.M))
    R[3].add("cox L^F = 1", _max_abs(b.L - 1.0) <= EXACT, max_abs=_max_abs(b.L - 1.0))
    _pricing(cfg, s, "cox", R[6])

    fam = ExponentialFamily(cfg.change_sigma_cox)
    try:
        adc = after_default_change(s, fam, b, cfg.threshold, cfg.cell_fraction)
        lam = _max_abs(adc.lamFQ - b.lamF, ~adc.excluded)
        R[9].add("cox after-default certified", adc.certification["passed"],
                 q_f=adc.certification["Q^F"]["max_dev"],
                 ratio=adc.certification["S/S^Q"]["max_dev"],
                 cells=adc.certification["alphaQ*S/S^Q"]["pass_fraction"])
        R[9].add("cox lambda^{F,Q} = lambda^F", lam <= EXACT, max_abs=lam)
        _projection(s, adc.spec, adc, "cox after-default", R[8])
    except MeasureChangeError as exc:
        R[9].add("cox after-default certified", False, error=str(exc))
        adc = None

    if adc is not None:
        tgt = adc.as_target()
        del adc
        try:
            rep = target_density_change(s, tgt, b, threshold=cfg.threshold)[1]
            gc.collect()
            R[10].add("cox S^Q = S*", rep["max_abs_SQ_minus_Sstar"] <= EXACT,
                      max_abs=rep["max_abs_SQ_minus_Sstar"],
                      boundary=rep["boundary_max_residual"])
        except MeasureChangeError as exc:
            R[10].add("cox S^Q = S*", False, error=str(exc))
        node = int(round(cfg.target_node_fraction * g.N))
        bad_diag = tgt.diag_values.copy()
        bad_diag[:, node] *= cfg.target_bump
        bad = type(tgt)(bad_diag, tgt.rows, tgt.integral_values)
        try:
            target_density_change(s, bad, b, threshold=cfg.threshold)
            R[10].add("violating target rejected", False, node=node)
        except TargetRejected as exc:
            R[10].add("violating target rejected at the perturbed node only",
                      exc.nodes.tolist() == [node], rejected_nodes=exc.nodes.tolist()[:10],
                      node=node)
        del tgt, bad, bad_diag
        gc.collect()
    else:
        R[10].add("cox target constructed", False)

    smp = sample_default(s)
    fd = f_mart_decomposition(s, b, smp, s.driver(0))
    a = max(_max_abs(fd.A), _max_abs(fd.AG))
    R[11].add("cox A^(Y,G) = 0", a <= EXACT, max_abs=a)
    del fd

    rep = verify_G_martingale(s, 1.0, 2.0, threshold=cfg.threshold)
    R[12].add("Y = 1, Y(theta) = 2 rejected", not rep.passed,
              condition1=rep.condition1.max_dev)
    rep = verify_G_martingale(s, 1.0, 1.0, threshold=cfg.threshold)
    R[12].add("positive control Y = Y(theta) = 1 accepted", rep.passed,
              condition1=rep.condition1.max_dev)
    return digest


def _constant_phase(cfg: SuiteConfig, R: Dict[int, CriterionResult], log: Callable):
    s = build_constant(cfg)
    R[1].add("constant rows", **normalization_check(s))
    b = doob_meyer(s)
    res = identity_residuals(s, b)
    R[3].add("constant identities", max(res.values()) <= EXACT, **res)
    R[3].add("constant M^F = 0", _max_abs(b.M) <= EXACT, max_abs=_max_abs(b.M))
    R[3].add("constant L^F = 1", _max_abs(b.L - 1.0) <= EXACT, max_abs=_max_abs(b.L - 1.0))

    T = cfg.payoff_T
    exact = math.exp(-cfg.const_lambda * T)
    pb = price_bd(s, survival_claim(T))
    r = pricing_cross_check(s, survival_claim(T), threshold=cfg.price_threshold)
    tol = cfg.price_threshold * r["sampled_se"] + cfg.const_lambda * cfg.grid.dt
    R[6].add("constant density price = exp(-lambda T)", abs(pb.estimate - exact) <= EXACT,
             abs_diff=abs(pb.estimate - exact))
    R[6].add("constant sampled survival vs exp(-lambda T)",
             abs(r["sampled_price"] - exact) <= tol, abs_diff=abs(r["sampled_price"] - exact),
             tolerance=tol)

    ident = MeasureChangeSpec(ConstantFamily(1.0))
    ch = girsanov_transform(s, ident, b)
    fixed = (np.array_equal(ch.QF, np.ones_like(ch.QF)) and np.array_equal(ch.SQ, s.surv)
             and np.array_equal(ch.lamFQ, b.lamF)
             and all(np.array_equal(ch.alpha_q_past(int(k)), s.alpha_past(int(k)))
                     for k in s.record))
    R[8].add("identity spec is an exact fixed point", fixed)
    spec = MeasureChangeSpec(ConstantFamily(0.5, normalized=True))
    ch = girsanov_transform(s, spec, b)
    _projection(s, spec, ch, "constant normalized q", R[8])
    del ch

    try:
        adc = after_default_change(s, ExponentialFamily(cfg.change_sigma_const), b,
                                   cfg.threshold, cfg.cell_fraction)
        lam = _max_abs(adc.lamFQ - b.lamF, ~adc.excluded)
        R[9].add("constant after-default certified", adc.certification["passed"],
                 q_f=adc.certification["Q^F"]["max_dev"],
                 ratio=adc.certification["S/S^Q"]["max_dev"],
                 cells=adc.certification["alphaQ*S/S^Q"]["pass_fraction"])
        R[9].add("constant lambda^{F,Q} = lambda^F", lam <= EXACT, max_abs=lam)
    except MeasureChangeError as exc:
        R[9].add("constant after-default certified", False, error=str(exc))


def _additive_phase(cfg: SuiteConfig, R: Dict[int, CriterionResult], log: Callable):
    s = build_additive(cfg)
    R[1].add(f"hjm_add rows ({s.n_paths} paths)", **normalization_check(s))
    d = drifted_surface(cfg.grid, 200, cfg.seed)
    R[1].add("drifted fixture rows", **normalization_check(d))
    rep = surface_identity_suite(d, cfg.threshold, cfg.cell_fraction, cfg.price_threshold)
    R[12].add("drifted fixture fails the identity suite", not rep["passed"], failed=rep["failed"])


def _repro_phase(cfg: SuiteConfig, R: Dict[int, CriterionResult], digests: dict, log: Callable):
    with tempfile.TemporaryDirectory() as tmp:
        for label, build in (("hjm", build_hjm), ("cox", build_cox)):
            s = build(cfg)
            path = os.path.join(tmp, f"{label}.bin")
            io.write_surface(s, path)
            d2 = io.file_digest(path)
            R[13].add(f"{label} surface bytes identical", d2 == digests[label], sha256=d2)
            reports = []
            for _ in range(2):
                reports.append(io.dumps({"provenance": io.provenance(s),
                                         "normalization": normalization_check(s),
                                         "cells": density_cells_check(s, cfg.threshold)}))
            again = io.read_surface(path)
            reports.append(io.dumps({"provenance": io.provenance(again),
                                     "normalization": normalization_check(again),
                                     "cells": density_cells_check(again, cfg.threshold)}))
            same = len(set(reports)) == 1
            R[13].add(f"{label} JSON reports identical", same,
                      sha256=hashlib.sha256(reports[0].encode()).hexdigest())
            del s, again
            gc.collect()


def run_acceptance(cfg: Optional[SuiteConfig] = None, log: Callable = print,
                   reproducibility: bool = True) -> Dict[int, CriterionResult]:
    """Evaluate all criteria; returns results keyed by criterion number."""
    cfg = SuiteConfig() if cfg is None else cfg
    R = {k: CriterionResult(k, v) for k, v in NAMES.items()}
    digests = {}
    phases = [("hjm", lambda: digests.__setitem__("hjm", _hjm_phase(cfg, R, log))),
              ("cox", lambda: digests.__setitem__("cox", _cox_phase(cfg, R, log))),
              ("constant", lambda: _constant_phase(cfg, R, log)),
              ("additive", lambda: _additive_phase(cfg, R, log))]
    if reproducibility:
        phases.append(("reproducibility", lambda: _repro_phase(cfg, R, digests, log)))
    else:
        R[13].add("skipped", True)
    for name, fn in phases:
        t0 = time.perf_counter()
        fn()
        gc.collect()
        log(f"  phase {name} done in {time.perf_counter() - t0:.1f}s")
    for r in R.values():
        if not r.parts:
            r.add("no checks ran", False)
    return R


def report(results: Dict[int, CriterionResult], cfg: SuiteConfig) -> dict:
    return {"provenance": io.provenance(model_id="acceptance", seed=cfg.seed, grid=cfg.grid),
            "config": asdict(cfg), "passed": all(r.passed for r in results.values()),
            "criteria": [results[k].to_dict() for k in sorted(results)]}
