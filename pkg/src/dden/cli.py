"""Command-line entry point ``dden``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .calculus import DegenerateError, linear_capped, price_ad, price_bd, survival_claim, unit_payoff
from .config import RunConfig, format_help, load_config
from .decompositions import doob_meyer, identity_residuals
from .grid import ConfigError, DegenerateRowError, gaussian_ensemble
from .measure import (ConstantFamily, ExponentialFamily, MeasureChangeError, MeasureChangeSpec,
                      after_default_change, girsanov_transform, immersion_change)
from .models import (CoxParams, HjmMultiplicativeParams, ModelError, build_constant_hazard,
                     exponential_row, simulate_cox, simulate_hjm_additive,
                     simulate_hjm_multiplicative, step_volatility)
from .verifier import test_constant_mean

EXIT_OK, EXIT_INVALID, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3

EPILOG = f"""\
configuration file
  Flat text, one 'key = value' per line; '#' starts a comment and blank lines
  are ignored.  Keys use dotted sections and unknown keys are rejected.  Any
  key can also be given on the command line as --set key=value, which wins
  over the file.  Recognized keys:

{format_help()}

exit codes
  0 success, 1 invalid configuration or arguments, 2 verification failure
  (any failed identity or rejected measure change), 3 I/O error.

environment
  DDEN_THREADS caps the number of simulation worker threads.
"""


class VerificationFailed(Exception):
    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


def _emit(obj, out: Optional[str]):
    text = io.dumps(obj)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _cfg(args) -> RunConfig:
    return load_config(args.config, args.set or ())


def simulate(cfg: RunConfig):
    """Build the configured surface (dispatch on model.id)."""
    g = cfg.grid
    if cfg.model_id == "constant":
        return build_constant_hazard(cfg.model_constant_lambda, g, cfg.run_n_paths, cfg.run_seed,
                                     record_every=cfg.record_every), None
    ens = gaussian_ensemble(g, cfg.run_n_paths, 1, cfg.run_seed)
    if cfg.model_id == "hjm_mult":
        params = HjmMultiplicativeParams.flat(g, cfg.model_hjm_lambda0, cfg.model_hjm_b)
        return simulate_hjm_multiplicative(params, ens, record_every=cfg.record_every), ens
    if cfg.model_id == "cox":
        params = CoxParams(cfg.model_cox_x0, cfg.model_cox_kappa, cfg.model_cox_mu,
                           cfg.model_cox_sigma, cfg.model_cox_m, cfg.model_cox_se_bound)
        return simulate_cox(params, ens, record_every=cfg.record_every), ens
    spec = step_volatility(g, cfg.model_additive_c, exponential_row(g, cfg.model_additive_lambda0))
    return simulate_hjm_additive(spec, ens, record_every=cfg.record_every), ens


def cmd_simulate(args) -> int:
    cfg = _cfg(args)
    surface, ens = simulate(cfg)
    out = Path(args.out) if args.out else Path(cfg.run_out_dir) / "surface.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_surface(surface, out)
    if args.ensemble and ens is not None:
        io.write_ensemble(ens, out.with_suffix(".ens"))
    meta = {"provenance": io.provenance(surface), "config": cfg.to_dict(),
            "surface": str(out), "record": surface.record.tolist(), "n_paths": surface.n_paths,
            "normalization_residual": surface.check_rows(),
            "max_adjustment": float(surface.adjust.max()),
            "paths_with_negative_hazard": int((surface.neg_count > 0).sum()),
            "absorbed_paths": int(surface.absorbed.sum()), "sha256": io.file_digest(out)}
    io.write_json(meta, out.with_suffix(".json"))
    io.write_metadata(out, {"command": "simulate", "surface": str(out)})
    _emit({"provenance": meta["provenance"], "surface": str(out), "sha256": meta["sha256"]}, None)
    return EXIT_OK


def _payoff(cfg: RunConfig, name: str, T: float):
    if name == "unit":
        return unit_payoff(T)
    if name == "survival":
        return survival_claim(T)
    if name == "linear_capped":
        return linear_capped(T, cfg.price_cap)
    raise ConfigError(f"unknown payoff {name!r} (unit | survival | linear_capped)")


def cmd_price(args) -> int:
    cfg = _cfg(args)
    surface = io.read_surface(args.surface)
    T = cfg.price_T if args.T is None else args.T
    t = cfg.price_t if args.t is None else args.t
    theta = cfg.price_theta if args.theta is None else args.theta
    m = cfg.price_m if args.m is None else args.m
    payoff = _payoff(cfg, args.payoff or cfg.price_payoff, T)
    paths = None if args.paths is None else [int(p) for p in args.paths.split(",")]
    if theta is None or theta < 0:
        rep = price_bd(surface, payoff, t, paths, m)
    else:
        rep = price_ad(surface, payoff, theta, t, paths, m)
    _emit({"provenance": io.provenance(surface), "payoff": payoff.name, "T": T,
           "report": rep.to_dict()}, args.out)
    return EXIT_OK


def cmd_decompose(args) -> int:
    cfg = _cfg(args)
    surface = io.read_surface(args.surface)
    b = doob_meyer(surface)
    res = identity_residuals(surface, b)
    keep = ~b.absorbed
    g = surface.grid
    tests = {}
    for name, X in (("M_F", b.M), ("L_F", b.L)):
        rep = test_constant_mean(np.where(keep[:, None], X, np.nan), name, g.nodes,
                                 cfg.verify_threshold, surface.seed)
        tests[name] = {"max_dev": rep.max_dev, "passed": rep.ok}
    ok = max(res.values()) <= 1e-10 and all(v["passed"] for v in tests.values())
    out = {"provenance": io.provenance(surface), "identity_residuals": res, "martingale_tests": tests,
           "absorbed_paths": int(b.absorbed.sum()), "passed": ok}
    if args.csv_dir:
        d = Path(args.csv_dir)
        d.mkdir(parents=True, exist_ok=True)
        io.export_diagonal_csv(surface, b, cfg.export_path, d / "decomposition.csv")
    _emit(out, args.out)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_change_measure(args) -> int:
    cfg = _cfg(args)
    surface = io.read_surface(args.surface)
    kind = args.kind or cfg.change_kind
    sigma = cfg.change_sigma if args.sigma is None else args.sigma
    b = doob_meyer(surface)
    try:
        if kind == "immersion":
            _, ch = immersion_change(surface, b)
        elif kind == "after_default":
            ch = after_default_change(surface, ExponentialFamily(sigma), b, cfg.verify_threshold,
                                      cfg.verify_cell_fraction)
        elif kind == "identity":
            ch = girsanov_transform(surface, MeasureChangeSpec(ConstantFamily(1.0)), b)
        else:
            raise ConfigError(f"unknown change kind {kind!r} (immersion | after_default | identity)")
    except MeasureChangeError as exc:
        raise VerificationFailed(str(exc), {"provenance": io.provenance(surface), "kind": kind,
                                            "error": str(exc), "report": exc.report}) from exc
    out = Path(args.out) if args.out else Path(cfg.run_out_dir) / "change.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_changed(ch, out)
    summary = {"provenance": io.provenance(surface), "kind": kind, "output": str(out),
               **ch.summary()}
    if ch.every_node:
        summary["max_abs_lambdaFQ_minus_lambdaF"] = float(
            np.max(np.abs(ch.lamFQ - b.lamF)[~ch.excluded])) if (~ch.excluded).any() else 0.0
        if kind == "immersion":
            summary["immersion_metric"] = ch.immersion_metric()
    io.write_json(summary, out.with_suffix(".json"))
    _emit(summary, None)
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import suite

    cfg = _cfg(args)
    if args.surface:
        surface = io.read_surface(args.surface)
        rep = suite.surface_identity_suite(surface, cfg.verify_threshold, cfg.verify_cell_fraction,
                                           cfg.verify_price_threshold)
        _emit(rep, args.out)
        for name in rep["failed"]:
            print(f"failed identity: {name}", file=sys.stderr)
        return EXIT_OK if rep["passed"] else EXIT_VERIFY
    if args.suite != "full":
        raise ConfigError("without --surface only '--suite full' is available")
    scfg = suite.SuiteConfig.small() if args.scale == "small" else suite.SuiteConfig()
    scfg.seed = cfg.run_seed
    results = suite.run_acceptance(scfg, log=lambda m: print(m, file=sys.stderr))
    for r in results.values():
        print(r.line(), file=sys.stderr)
    rep = suite.report(results, scfg)
    _emit(rep, args.out)
    return EXIT_OK if rep["passed"] else EXIT_VERIFY


def cmd_export(args) -> int:
    cfg = _cfg(args)
    surface = io.read_surface(args.surface)
    path = cfg.export_path if args.path is None else args.path
    if not 0 <= path < surface.n_paths:
        raise ConfigError(f"path index {path} out of range")
    d = Path(args.out_dir or cfg.run_out_dir)
    d.mkdir(parents=True, exist_ok=True)
    io.export_surface_csv(surface, path, d / "rows.csv")
    io.export_diagonal_csv(surface, doob_meyer(surface), path, d / "diagonal.csv")
    mean_rows = [(float(k * surface.grid.dt), float(surface.alpha[:, r].mean(axis=0).sum()
                                                     * surface.grid.dt), float(surface.tail[:, r].mean()))
                 for r, k in enumerate(surface.record)]
    io.write_csv(d / "row_mass.csv", ["t", "mean_cell_mass", "mean_tail"], mean_rows)
    _emit({"provenance": io.provenance(surface), "files": sorted(str(p) for p in d.glob("*.csv"))},
          None)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dden", description=(
        "Simulate conditional default-time density surfaces and run pricing, decomposition, "
        "measure-change and verification steps on them."),
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=EPILOG,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="configuration file (key = value lines)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
        sp.set_defaults(func=fn)
        return sp

    sp = add("simulate", cmd_simulate, "simulate a surface and write it as DSRF1 plus JSON")
    sp.add_argument("--out", help="surface path (default <run.out_dir>/surface.bin)")
    sp.add_argument("--ensemble", action="store_true", help="also write the driver ensemble (DDEN1)")

    sp = add("price", cmd_price, "price a claim on a stored surface")
    sp.add_argument("--surface", required=True)
    sp.add_argument("--payoff", help="unit | survival | linear_capped")
    sp.add_argument("--T", type=float)
    sp.add_argument("--t", type=float)
    sp.add_argument("--theta", type=float, help="default time for after-default pricing")
    sp.add_argument("--m", type=int, help="inner branches for t > 0")
    sp.add_argument("--paths", help="comma-separated path indices for t > 0 (default 0)")
    sp.add_argument("--out")

    sp = add("decompose", cmd_decompose, "additive and multiplicative survival decompositions")
    sp.add_argument("--surface", required=True)
    sp.add_argument("--csv-dir", help="also export the decomposition of path export.path as CSV")
    sp.add_argument("--out")

    sp = add("change-measure", cmd_change_measure, "apply and certify a change of measure")
    sp.add_argument("--surface", required=True)
    sp.add_argument("--kind", help="immersion | after_default | identity")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--out", help="DCHG1 path (default <run.out_dir>/change.bin)")

    sp = add("verify", cmd_verify, "run the identity suite on a surface or the acceptance suite")
    sp.add_argument("--surface")
    sp.add_argument("--suite", default="full", choices=["full"])
    sp.add_argument("--scale", default="reference", choices=["reference", "small"],
                    help="acceptance-suite scale when no surface is given")
    sp.add_argument("--out")

    sp = add("export", cmd_export, "export plot data of a surface as CSV")
    sp.add_argument("--surface", required=True)
    sp.add_argument("--path", type=int)
    sp.add_argument("--out-dir")
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except VerificationFailed as exc:
        print(f"dden: verification failed: {exc}", file=sys.stderr)
        if exc.payload is not None:
            _emit(exc.payload, getattr(args, "out", None) and str(args.out) + ".failure.json")
        return EXIT_VERIFY
    except (ConfigError, ModelError, DegenerateError, DegenerateRowError, ValueError) as exc:
        print(f"dden: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"dden: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
