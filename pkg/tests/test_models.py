import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dden.grid import ConfigError, TimeGrid, gaussian_ensemble
from dden.models import (CoxParams, HjmMultiplicativeParams, ModelError, build_constant_hazard,
                         exponential_row, model_from_params, record_schedule, simulate_cox,
                         simulate_hjm_additive, simulate_hjm_multiplicative, step_volatility)
from dden.verifier import cellwise_constant_mean


def _survival_from_rows(surface):
    dt = surface.grid.dt
    out = []
    for r, k in enumerate(surface.record):
        out.append(surface.alpha[:, r, k:].sum(axis=1) * dt + surface.tail[:, r])
    return np.stack(out, axis=1)


def test_constant_hazard_rows_are_exact_cell_masses(const, grid):
    row = exponential_row(grid, 0.2)
    theta = grid.nodes[:-1]
    np.testing.assert_allclose(row.cells * grid.dt, np.exp(-0.2 * theta) - np.exp(-0.2 * (theta + grid.dt)),
                               rtol=1e-13)
    assert const.check_rows() <= 1e-15
    np.testing.assert_allclose(const.surv[0], np.exp(-0.2 * grid.nodes), rtol=1e-14)


@pytest.mark.parametrize("lam", [0.0, -0.1, np.nan])
def test_constant_hazard_rejects_non_positive(grid, lam):
    with pytest.raises(ConfigError):
        build_constant_hazard(lam, grid, 10)


def test_hjm_rows_normalized_and_consistent(hjm):
    assert hjm.check_rows(1e-10) <= 1e-13
    assert hjm.adjust.max() == 0.0
    for r, k in enumerate(hjm.record):
        if k < hjm.grid.N:
            np.testing.assert_array_equal(hjm.diag_alpha[:, k], hjm.alpha[:, r, k])
    np.testing.assert_allclose(_survival_from_rows(hjm), hjm.surv[:, hjm.record], atol=1e-13)


def test_hjm_without_volatility_is_the_constant_hazard():
    g = TimeGrid(5.0, 50)
    ens = gaussian_ensemble(g, 5, 1, 0)
    s = simulate_hjm_multiplicative(HjmMultiplicativeParams.flat(g, 0.25, 0.0), ens, record_every=10)
    row = exponential_row(g, 0.25)
    np.testing.assert_allclose(s.alpha, np.broadcast_to(row.cells, s.alpha.shape), rtol=1e-12)
    np.testing.assert_allclose(s.surv, np.broadcast_to(np.exp(-0.25 * g.nodes), s.surv.shape),
                               rtol=1e-12)


def test_hjm_cells_are_martingales(hjm):
    for r in range(1, hjm.record.shape[0]):
        stat = cellwise_constant_mean(hjm.alpha[:, r], hjm.alpha[:, 0], 4.0)
        assert stat["pass_fraction"] >= 0.95


def test_hjm_params_validation(grid):
    with pytest.raises(ConfigError):
        HjmMultiplicativeParams.flat(grid, -0.2, -0.1)
    with pytest.raises(ConfigError):
        HjmMultiplicativeParams.flat(grid, 0.2, 0.1)
    with pytest.raises(ConfigError):
        HjmMultiplicativeParams(np.ones(3), np.zeros(4))


@given(st.floats(0.05, 0.5), st.floats(-0.3, 0.0), st.integers(0, 10_000))
def test_hjm_rows_always_normalize(lam0, b, seed):
    g = TimeGrid(4.0, 20)
    ens = gaussian_ensemble(g, 8, 1, seed)
    s = simulate_hjm_multiplicative(HjmMultiplicativeParams.flat(g, lam0, b), ens, record_every=5)
    assert s.check_rows(1e-10) <= 1e-10
    assert np.all((s.surv >= 0) & (s.surv <= 1 + 1e-14))


def test_cox_without_volatility_matches_constant_hazard(grid):
    ens = gaussian_ensemble(grid, 4, 1, 3)
    s = simulate_cox(CoxParams(math.log(0.2), 1.0, math.log(0.2), 0.0, m=4), ens, record_every=25)
    c = build_constant_hazard(0.2, grid, 4, record_every=25)
    np.testing.assert_allclose(s.alpha, c.alpha, atol=1e-15)
    np.testing.assert_allclose(s.surv, c.surv, atol=1e-15)


def test_cox_rows_normalized_and_immersed(cox):
    assert cox.check_rows(1e-10) <= 1e-13
    assert cox.immersed
    for r, k in enumerate(cox.record):
        np.testing.assert_allclose(cox.alpha[:, r, :k], cox.diag_alpha[:, :k], rtol=1e-13)


def test_cox_flags_inner_standard_error(grid):
    ens = gaussian_ensemble(grid, 5, 1, 4)
    s = simulate_cox(CoxParams(math.log(0.2), 1.0, math.log(0.2), 0.5, m=2, se_bound=1e-9), ens,
                     record_every=50)
    assert s.params["inner_se_flagged"] > 0


def test_columns_replay_recorded_rows(hjm):
    sub = hjm.subset(np.arange(50))
    cols = np.tile(np.array([10, 60]), (50, 1))
    v = sub.columns(cols)
    for r, k in enumerate(sub.record):
        np.testing.assert_array_equal(v[:, 0, k], sub.alpha[:, r, 10])
        np.testing.assert_array_equal(v[:, 1, k], sub.alpha[:, r, 60])


def test_row_at_replays_unrecorded_nodes(hjm):
    cells, tails = hjm.row_at([0, 1, 2], 30)
    assert np.allclose(cells.sum(axis=1) * hjm.grid.dt + tails, 1.0, atol=1e-13)
    np.testing.assert_array_equal(cells[:, 30], hjm.diag_alpha[:3, 30])


def test_branch_is_reproducible(hjm):
    a, wa = hjm.branch(3, 20, 60, 5, tag=1)
    b, wb = hjm.branch(3, 20, 60, 5, tag=1)
    c, _ = hjm.branch(3, 20, 60, 5, tag=2)
    np.testing.assert_array_equal(a.rows, b.rows)
    np.testing.assert_array_equal(wa, wb)
    assert not np.array_equal(a.rows, c.rows)
    np.testing.assert_allclose(wa[:, 0], hjm.driver(0)[3, 20])


def test_additive_model_normalizes_and_starts_at_alpha0(grid):
    ens = gaussian_ensemble(grid, 400, 1, 8)
    a0 = exponential_row(grid, 0.2)
    s = simulate_hjm_additive(step_volatility(grid, 0.002, a0), ens, record_every=25)
    assert s.check_rows(1e-10) <= 1e-13
    np.testing.assert_array_equal(s.alpha[:, 0], np.broadcast_to(a0.cells, (400, grid.N)))
    assert s.adjust.max() <= 1e-6


def test_additive_model_with_excess_volatility_fails(grid):
    ens = gaussian_ensemble(grid, 200, 1, 8)
    with pytest.raises(ModelError):
        simulate_hjm_additive(step_volatility(grid, 0.05, exponential_row(grid, 0.2)), ens,
                              record_every=25)


def test_record_schedule_contains_endpoints():
    g = TimeGrid(10.0, 1000)
    rec = record_schedule(g, 20000)
    assert rec[0] == 0 and rec[-1] == 1000
    np.testing.assert_array_equal(record_schedule(g, 10, record=[2.5]), [0, 250, 1000])


def test_model_parameters_round_trip(hjm, cox, const):
    for s in (hjm, cox, const):
        m = model_from_params(s.grid, s.model_id, s.params, s.seed)
        assert m.params_dict() == s.model.params_dict()
