"""Flat ``key = value`` run configuration with dotted sections."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .grid import ConfigError, TimeGrid

MODELS = ("hjm_mult", "cox", "constant", "hjm_add")


@dataclass
class RunConfig:
    """All settings of a batch run.

    Every field maps to one dotted config key: ``grid_T_max`` is
    ``grid.T_max`` and so on (see ``KEYS``).
    """

    grid_T_max: float = 10.0
    grid_N: int = 1000
    run_seed: int = 20240917
    run_n_paths: int = 20000
    run_out_dir: str = "out"
    run_record_every: int = 0
    model_id: str = "hjm_mult"
    model_constant_lambda: float = 0.2
    model_hjm_lambda0: float = 0.2
    model_hjm_b: float = -0.1
    model_cox_x0: float = math.log(0.2)
    model_cox_kappa: float = 1.0
    model_cox_mu: float = math.log(0.2)
    model_cox_sigma: float = 0.3
    model_cox_m: int = 16
    model_cox_se_bound: float = math.inf
    model_additive_c: float = 0.002
    model_additive_lambda0: float = 0.2
    verify_threshold: float = 4.0
    verify_price_threshold: float = 3.0
    verify_cell_fraction: float = 0.95
    price_payoff: str = "survival"
    price_T: float = 1.0
    price_t: float = 0.0
    price_theta: float = -1.0
    price_m: int = 64
    price_cap: float = 10.0
    change_kind: str = "immersion"
    change_sigma: float = 0.2
    export_path: int = 0

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.grid_T_max, self.grid_N)

    @property
    def record_every(self) -> Optional[int]:
        return self.run_record_every or None

    def validate(self) -> "RunConfig":
        g = self.grid
        if self.run_n_paths < 1:
            raise ConfigError("run.n_paths must be >= 1")
        if self.model_id not in MODELS:
            raise ConfigError(f"model.id must be one of {', '.join(MODELS)}")
        if self.model_constant_lambda <= 0 or self.model_hjm_lambda0 <= 0:
            raise ConfigError("hazard levels must be positive")
        if self.model_cox_m < 2 or self.model_cox_kappa < 0 or self.model_cox_sigma < 0:
            raise ConfigError("model.cox needs m >= 2 with non-negative kappa and sigma")
        if self.run_record_every < 0:
            raise ConfigError("run.record_every must be >= 0")
        if self.verify_threshold <= 0 or self.verify_price_threshold <= 0:
            raise ConfigError("thresholds must be positive")
        if not 0 < self.verify_cell_fraction <= 1:
            raise ConfigError("verify.cell_fraction must be in (0, 1]")
        g.index(self.price_T)
        g.index(self.price_t)
        if self.price_theta >= 0:
            g.index(self.price_theta)
        if self.price_m < 2:
            raise ConfigError("price.m must be >= 2")
        return self

    def to_dict(self) -> dict:
        return {KEY_OF[f.name]: getattr(self, f.name) for f in fields(self) if f.name in KEY_OF}


KEYS = {
    "grid.T_max": ("grid_T_max", "horizon T_max > 0"),
    "grid.N": ("grid_N", "number of steps N >= 2"),
    "run.seed": ("run_seed", "master seed (non-negative integer)"),
    "run.n_paths": ("run_n_paths", "number of outer paths"),
    "run.out_dir": ("run_out_dir", "output directory"),
    "run.record_every": ("run_record_every", "row stride; 0 picks a memory-budgeted stride"),
    "model.id": ("model_id", "hjm_mult | cox | constant | hjm_add"),
    "model.constant.lambda": ("model_constant_lambda", "constant hazard"),
    "model.hjm.lambda0": ("model_hjm_lambda0", "flat initial forward hazard"),
    "model.hjm.b": ("model_hjm_b", "multiplicative volatility of the forward hazard"),
    "model.cox.x0": ("model_cox_x0", "initial log-intensity"),
    "model.cox.kappa": ("model_cox_kappa", "mean-reversion speed"),
    "model.cox.mu": ("model_cox_mu", "long-run log-intensity"),
    "model.cox.sigma": ("model_cox_sigma", "log-intensity volatility"),
    "model.cox.m": ("model_cox_m", "inner paths per outer node"),
    "model.cox.se_bound": ("model_cox_se_bound", "flag rows whose inner SE exceeds this"),
    "model.additive.c": ("model_additive_c", "step volatility level"),
    "model.additive.lambda0": ("model_additive_lambda0", "hazard of the exponential initial row"),
    "verify.threshold": ("verify_threshold", "SE multiple for martingale tests"),
    "verify.price_threshold": ("verify_price_threshold", "SE multiple for pricing checks"),
    "verify.cell_fraction": ("verify_cell_fraction", "required pass fraction of cell tests"),
    "price.payoff": ("price_payoff", "unit | survival | linear_capped"),
    "price.T": ("price_T", "payoff maturity (grid node)"),
    "price.t": ("price_t", "valuation time (grid node)"),
    "price.theta": ("price_theta", "default time for after-default pricing; < 0 means before default"),
    "price.m": ("price_m", "inner branches for t > 0"),
    "price.cap": ("price_cap", "cap of the linear_capped payoff"),
    "change.kind": ("change_kind", "immersion | after_default | identity"),
    "change.sigma": ("change_sigma", "exponent of the after-default family exp(sigma W - sigma^2 t / 2)"),
    "export.path": ("export_path", "path index exported to CSV"),
}
KEY_OF = {v[0]: k for k, v in KEYS.items()}
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    attr = KEYS[key][0]
    typ = _TYPES[attr]
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from exc
    return raw.strip().strip('"')


def apply(cfg: RunConfig, key: str, raw: str) -> None:
    key = key.strip()
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(cfg, KEYS[key][0], _convert(key, raw.strip()))


def parse_config(text: str, overrides=()) -> RunConfig:
    """Parse config text; ``overrides`` are extra ``key=value`` strings."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        apply(cfg, key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        apply(cfg, key, value)
    return cfg.validate()


def load_config(path=None, overrides=()) -> RunConfig:
    text = "" if path is None else Path(path).read_text()
    return parse_config(text, overrides)


def format_help() -> str:
    width = max(len(k) for k in KEYS)
    defaults = RunConfig()
    lines = []
    for key, (attr, doc) in KEYS.items():
        lines.append(f"  {key:<{width}}  {doc} (default {getattr(defaults, attr)!r})")
    return "\n".join(lines)
