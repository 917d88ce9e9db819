import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dden.grid import (ConfigError, DegenerateRowError, DensityRow, TimeGrid, gaussian_ensemble,
                       integrate_cells, path_rng, renormalize, renormalize_arrays)
from dden.models import exponential_row


@pytest.mark.parametrize("T_max, N", [(5.0, 1), (0.0, 10), (-1.0, 10), (np.inf, 10), (1.0, 2.5)])
def test_grid_rejects_bad_configuration(T_max, N):
    with pytest.raises(ConfigError):
        TimeGrid(T_max, N)


def test_grid_nodes_and_index():
    g = TimeGrid(10.0, 1000)
    assert g.dt == pytest.approx(0.01)
    assert g.nodes[-1] == pytest.approx(10.0)
    assert g.index(2.5) == 250
    assert g.index(0.0) == 0 and g.index(10.0) == 1000
    with pytest.raises(ConfigError):
        g.index(0.005)
    with pytest.raises(ConfigError):
        g.index(10.01)


def test_path_streams_do_not_depend_on_ensemble_size():
    g = TimeGrid(1.0, 50)
    small = gaussian_ensemble(g, 3, 1, 99)
    large = gaussian_ensemble(g, 40, 1, 99)
    np.testing.assert_array_equal(small.increments, large.increments[:3])
    np.testing.assert_array_equal(small.increments[1], path_rng(99, 1).standard_normal((50, 1))
                                  * np.sqrt(g.dt))


def test_child_streams_differ_from_parent():
    a = path_rng(7, 0).random(4)
    b = path_rng(7, 0, 1).random(4)
    c = path_rng(7, 0, 2).random(4)
    assert not np.allclose(a, b) and not np.allclose(b, c)


def test_driver_increment_variance():
    g = TimeGrid(1.0, 20)
    ens = gaussian_ensemble(g, 20000, 2, 5)
    var = ens.increments.var(axis=0)
    assert np.all(np.abs(var / g.dt - 1) < 0.05)
    W = ens.driver(1)
    assert W.shape == (20000, 21) and np.all(W[:, 0] == 0)
    assert W[:, -1].var() == pytest.approx(1.0, rel=0.05)


def test_exponential_row_integrates_to_exact_survival():
    g = TimeGrid(10.0, 100)
    row = exponential_row(g, 0.3)
    assert row.mass() == pytest.approx(1.0, abs=1e-14)
    for theta in (0.0, 1.0, 4.5, 9.9):
        s = integrate_cells(row, theta, g.T_max) + row.tail
        assert s == pytest.approx(np.exp(-0.3 * theta), abs=1e-14)


def test_integrate_cells_weights_and_bounds():
    row = DensityRow(np.array([1.0, 2.0, 3.0, 4.0]), 0.0, 0.1)
    assert integrate_cells(row, 0.1, 0.3) == pytest.approx(0.5)
    assert integrate_cells(row, 0.0, 0.4, np.array([1.0, 0.0, 1.0, 0.0])) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        integrate_cells(row, 0.3, 0.1)


def test_row_check_flags_violations():
    DensityRow(np.array([2.5, 2.5]), 0.5, 0.1).check()
    with pytest.raises(DegenerateRowError):
        DensityRow(np.array([2.5, 2.6]), 0.5, 0.1).check()
    with pytest.raises(DegenerateRowError):
        DensityRow(np.array([-1.0, 6.0]), 0.5, 0.1).check()
    with pytest.raises(DegenerateRowError):
        DensityRow(np.array([np.nan, 5.0]), 0.5, 0.1).check()


def test_renormalize_rejects_zero_mass():
    with pytest.raises(DegenerateRowError):
        renormalize(DensityRow(np.zeros(3), 0.0, 0.1))


rows = hnp.arrays(np.float64, st.integers(2, 40),
                  elements=st.floats(-0.5, 5.0, allow_nan=False, allow_infinity=False))


@given(rows, st.floats(0.0, 2.0))
def test_renormalize_produces_valid_rows(cells, tail):
    if (np.maximum(cells, 0).sum() * 0.1 + tail) <= 1e-6:
        return
    out = renormalize(DensityRow(cells, tail, 0.1))
    out.check(1e-12)
    assert out.adjustment >= 0


@given(rows, st.floats(0.0, 2.0))
def test_renormalize_is_idempotent(cells, tail):
    if (np.maximum(cells, 0).sum() * 0.1 + tail) <= 1e-6:
        return
    once = renormalize(DensityRow(cells, tail, 0.1))
    twice = renormalize(once)
    np.testing.assert_array_equal(once.cells, twice.cells)
    assert once.tail == twice.tail and twice.adjustment == 0.0


@given(hnp.arrays(np.float64, (3, 8), elements=st.floats(0.0, 3.0)), st.floats(0.1, 1.0))
def test_renormalize_arrays_matches_rowwise(cells, tail):
    tails = np.full(3, tail)
    c, tl, adj = renormalize_arrays(cells, tails, 0.25)
    for i in range(3):
        r = renormalize(DensityRow(cells[i], tail, 0.25))
        np.testing.assert_allclose(c[i], r.cells, rtol=0, atol=0)
        assert tl[i] == r.tail and adj[i] == r.adjustment
