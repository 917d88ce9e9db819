import numpy as np
import pytest

from dden.decompositions import (ConstantPostDefault, build_jump_martingales, doob_meyer,
                                 f_mart_decomposition, g_intensity, g_orthogonality,
                                 identity_residuals, pooled_g_intensity, verify_G_martingale)
from dden.verifier import cellwise_constant_mean, sample_default, test_constant_mean


@pytest.fixture(scope="module")
def hjm_bundle(hjm):
    return doob_meyer(hjm)


def test_identities_hold_pathwise(hjm, cox, const, hjm_bundle):
    for s, b in ((hjm, hjm_bundle), (cox, doob_meyer(cox)), (const, doob_meyer(const))):
        res = identity_residuals(s, b)
        assert res["additive"] <= 1e-12 and res["multiplicative"] <= 1e-12


def test_constant_hazard_decomposition_oracle(const, grid):
    b = doob_meyer(const)
    # lambda^F dt = 1 - exp(-lambda dt) per cell, so Lambda^F = lambda t exactly
    np.testing.assert_allclose(b.Lam[0], 0.2 * grid.nodes, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(b.A[0], 1.0 - np.exp(-0.2 * grid.nodes), atol=1e-14)
    assert np.max(np.abs(b.M)) <= 1e-14 and np.max(np.abs(b.L - 1.0)) <= 1e-13


def test_immersed_surfaces_have_trivial_martingale_parts(cox):
    b = doob_meyer(cox)
    assert np.max(np.abs(b.M)) <= 1e-12
    assert np.max(np.abs(b.L - 1.0)) <= 1e-12


def test_hjm_martingale_parts(hjm_bundle, hjm):
    assert test_constant_mean(hjm_bundle.M, "M").passed
    assert test_constant_mean(hjm_bundle.L, "L").passed
    assert np.max(np.abs(hjm_bundle.M)) > 1e-4


def test_g_intensity_definition(hjm_bundle, hjm):
    smp = sample_default(hjm)
    k = 40
    lg = g_intensity(hjm_bundle, smp, k)
    alive = smp.cell[:, 0] >= k
    np.testing.assert_array_equal(lg[alive], hjm_bundle.lamF[alive, k])
    assert np.all(lg[~alive] == 0)
    pooled = pooled_g_intensity(hjm_bundle, smp)
    np.testing.assert_array_equal(pooled[:, k], lg)


def test_intensity_density_link(hjm_bundle, hjm):
    smp = sample_default(hjm, n_draws=2)
    stat = cellwise_constant_mean(pooled_g_intensity(hjm_bundle, smp), hjm.alpha[0, 0][None], 3.0)
    assert stat["pass_fraction"] >= 0.95


def test_compensated_jump_martingales(hjm_bundle, hjm, grid):
    smp = sample_default(hjm)
    jm = build_jump_martingales(hjm, hjm_bundle, smp, H=grid.nodes, u=1.0)
    assert test_constant_mean(jm.NG, threshold=3.0).passed
    assert test_constant_mean(jm.NHG, threshold=3.0).passed
    assert np.max(np.abs(jm.UG - 1.0)) <= 1e-12


def test_compensated_indicator_oracle_on_constant_hazard(const, grid):
    b = doob_meyer(const)
    smp = sample_default(const, n_draws=1)
    jm = build_jump_martingales(const, b, smp)
    tau = np.minimum(smp.tau[:, 0], grid.T_max)
    cell = np.minimum(smp.cell[:, 0], grid.N)
    frac = np.where(smp.cell[:, 0] < grid.N, smp.frac[:, 0], 0.0)
    t = grid.nodes
    # compensator stopped at tau: full cells at rate lambda, then the uniform-in-cell part
    p = -np.expm1(-0.2 * grid.dt)
    comp_tau = 0.2 * grid.dt * cell - np.log1p(-p * frac)
    comp = np.where(t[None, :] < tau[:, None], 0.2 * t[None, :], comp_tau[:, None])
    expected = (smp.tau[:, 0][:, None] <= t[None, :]) - comp
    np.testing.assert_allclose(jm.NG, expected, atol=1e-12)


def test_g_decomposition(hjm_bundle, hjm, cox):
    smp = sample_default(hjm)
    W = hjm.driver(0)
    fd = f_mart_decomposition(hjm, hjm_bundle, smp, W)
    assert test_constant_mean(fd.residual).passed
    orth = g_orthogonality(fd.residual, smp, W, [25, 50, 75], 100, hjm.grid.dt)
    assert all(o["passed"] for o in orth)
    # W itself is not a G-martingale on the HJM surface: A is not zero
    assert np.max(np.abs(fd.AG)) > 1e-3
    bc = doob_meyer(cox)
    fc = f_mart_decomposition(cox, bc, sample_default(cox), cox.driver(0))
    assert np.max(np.abs(fc.AG)) <= 1e-12


def test_verify_g_martingale(cox, hjm, hjm_bundle):
    assert verify_G_martingale(cox, 1.0, 1.0).passed
    assert not verify_G_martingale(cox, 1.0, 2.0).passed
    # 1{tau > t} exp(Lambda^F_t): condition 1 reduces to L^F
    assert verify_G_martingale(hjm, np.exp(hjm_bundle.Lam), ConstantPostDefault(0.0)).passed
