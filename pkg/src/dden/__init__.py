"""Conditional-density default-time simulation and martingale verification."""

__version__ = "0.1.0"

from .grid import (ConfigError, DegenerateRowError, DensityRow, PathEnsemble, TimeGrid,  # noqa: E402
                   gaussian_ensemble, integrate_cells, make_grid, renormalize)
from .models import (AdditiveVolSpec, CoxParams, DensitySurfaceEnsemble,  # noqa: E402
                     HjmMultiplicativeParams, ModelError, build_constant_hazard, simulate_cox,
                     simulate_hjm_additive, simulate_hjm_multiplicative, step_volatility)

__all__ = [
    "AdditiveVolSpec", "ConfigError", "CoxParams", "DegenerateRowError", "DensityRow",
    "DensitySurfaceEnsemble", "HjmMultiplicativeParams", "ModelError", "PathEnsemble", "TimeGrid",
    "build_constant_hazard", "gaussian_ensemble", "integrate_cells", "make_grid", "renormalize",
    "simulate_cox", "simulate_hjm_additive", "simulate_hjm_multiplicative", "step_volatility",
]
