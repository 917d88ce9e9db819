import numpy as np
import pytest

from dden.grid import TimeGrid
from dden.suite import (NAMES, CriterionResult, SuiteConfig, drifted_surface, run_acceptance,
                        surface_identity_suite)


@pytest.fixture(scope="module")
def small_results():
    return run_acceptance(SuiteConfig.small(), log=lambda m: None, reproducibility=False)


@pytest.mark.parametrize("number", sorted(NAMES))
def test_small_scale_criteria(small_results, number):
    r = small_results[number]
    assert r.passed, r.line()


def test_identity_suite_on_model_surfaces(hjm, cox, const):
    for s in (hjm, cox, const):
        rep = surface_identity_suite(s)
        assert rep["passed"], rep["failed"]


def test_identity_suite_rejects_the_drifted_fixture():
    rep = surface_identity_suite(drifted_surface(TimeGrid(10.0, 100), 3000, 5))
    assert not rep["passed"]
    assert {"M_F_martingale", "L_F_martingale"} <= set(rep["failed"])
    # normalization and the pathwise identities still hold on the fixture
    assert "normalization" not in rep["failed"]


def test_result_line_format():
    r = CriterionResult(3, "demo")
    r.add("a", True)
    assert r.line() == "criterion  3 [PASS] demo"
    r.add("b", False, value=np.float64(2.0))
    assert r.line() == "criterion  3 [FAIL] demo (failed: b)"
