import numpy as np
import pytest

from dden.decompositions import doob_meyer
from dden.grid import ConfigError
from dden.measure import (ArrayDensity, ConstantFamily, ExponentialFamily, ImmersionFamily,
                          JumpAtDefaultFamily, MeasureChangeError, MeasureChangeSpec,
                          TargetRejected, after_default_change, girsanov_transform,
                          immersion_change, projection_quadrature, target_density_change)


@pytest.fixture(scope="module")
def bundles(hjm, cox, const):
    return {"hjm": doob_meyer(hjm), "cox": doob_meyer(cox), "const": doob_meyer(const)}


def test_identity_is_an_exact_fixed_point(hjm, bundles):
    b = bundles["hjm"]
    ch = girsanov_transform(hjm, MeasureChangeSpec(ConstantFamily(1.0)), b)
    assert np.all(ch.QF == 1.0)
    np.testing.assert_array_equal(ch.SQ, hjm.surv)
    np.testing.assert_array_equal(ch.lamFQ, b.lamF)
    for k in hjm.record:
        np.testing.assert_array_equal(ch.alpha_q_past(int(k)), hjm.alpha_past(int(k)))


def test_immersion_change_on_hjm(hjm, bundles):
    b = bundles["hjm"]
    spec, ch = immersion_change(hjm, b)
    assert isinstance(spec.family, ImmersionFamily)
    assert ch.immersion_metric() <= 1e-10
    assert np.max(np.abs(ch.lamFQ - b.lamF)[~ch.excluded]) <= 1e-10
    assert np.max(np.abs(ch.QF - 1.0)) <= 1e-12


def test_immersion_change_is_identity_on_immersed_surfaces(cox, bundles):
    spec, ch = immersion_change(cox, bundles["cox"])
    assert spec.identity and ch.immersion_metric() <= 1e-12


@pytest.mark.parametrize("name", ["hjm", "const"])
def test_projection_matches_quadrature(name, hjm, const, bundles):
    s = {"hjm": hjm, "const": const}[name]
    b = bundles[name]
    fam = ImmersionFamily(b) if name == "hjm" else ConstantFamily(0.5, normalized=True)
    spec = MeasureChangeSpec(fam)
    ch = girsanov_transform(s, spec, b)
    paths = np.arange(100)
    for k in s.record[::2]:
        q = projection_quadrature(s, spec, int(k), paths)
        assert np.max(np.abs(ch.qf_at(int(k))[paths] - q)) <= 1e-10


def test_after_default_change_keeps_the_intensity(const, bundles):
    b = bundles["const"]
    ch = after_default_change(const, ExponentialFamily(0.2), b)
    assert ch.certification["passed"]
    assert np.max(np.abs(ch.lamFQ - b.lamF)) <= 1e-12
    row = ch.initial_row()
    assert row.mass() == pytest.approx(1.0, abs=1e-12)


def test_after_default_change_rejects_pre_default_weight(const, bundles):
    with pytest.raises(MeasureChangeError):
        after_default_change(const, ConstantFamily(2.0), bundles["const"])


def test_same_driver_change_is_rejected_on_hjm(hjm, bundles):
    # exp(sigma W) reweights the pre-default law of an HJM surface, so Q^F drifts
    with pytest.raises(MeasureChangeError):
        after_default_change(hjm, ExponentialFamily(0.4), bundles["hjm"])


def test_jump_at_default_keeps_qf_at_one(const, bundles):
    fam = JumpAtDefaultFamily(1.5, bundles["const"])
    ch = girsanov_transform(const, MeasureChangeSpec(fam), bundles["const"])
    assert np.max(np.abs(ch.QF - 1.0)) <= 1e-12
    # the Q-hazard is the constant rate 1.5 * 0.2, in exact cell-mass form
    dt = const.grid.dt
    np.testing.assert_allclose(ch.lamFQ, -np.expm1(-1.5 * 0.2 * dt) / dt, rtol=1e-12)


def test_target_density_change(cox, bundles):
    b = bundles["cox"]
    adc = after_default_change(cox, ExponentialFamily(0.3), b)
    tgt = adc.as_target()
    ch, rep = target_density_change(cox, tgt, b)
    assert rep["max_abs_SQ_minus_Sstar"] <= 1e-10
    assert rep["boundary_max_residual"] <= 1e-10
    node = 37
    bad_diag = tgt.diag_values.copy()
    bad_diag[:, node] *= 1.01
    with pytest.raises(TargetRejected) as info:
        target_density_change(cox, ArrayDensity(bad_diag, tgt.rows, tgt.integral_values), b)
    assert info.value.nodes.tolist() == [node]


def test_target_without_integral_is_rejected(cox, bundles):
    tgt = ArrayDensity(np.ones((cox.n_paths, cox.grid.N)), {}, None)
    with pytest.raises(ConfigError):
        target_density_change(cox, tgt, bundles["cox"])


def test_nonpositive_density_is_rejected(const, bundles):
    with pytest.raises(ConfigError):
        ConstantFamily(-1.0)
