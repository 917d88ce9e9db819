import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dden.calculus import (Payoff, check_immersion, expect_f_tau, forward_hazard, linear_capped,
                           price_ad, price_bd, survival, survival_claim, unit_payoff)
from dden.grid import ConfigError


def test_survival_on_constant_hazard(const):
    for t, theta in [(0.0, 0.0), (0.0, 3.0), (2.5, 2.5), (2.5, 7.0)]:
        assert survival(const, 0, t, theta) == pytest.approx(np.exp(-0.2 * theta), abs=1e-14)


def test_forward_hazard_recovers_constant_rate(const):
    for theta in (0.0, 1.0, 5.0):
        assert forward_hazard(const, 0, 0.0, theta) == pytest.approx(0.2, rel=1e-12)


def test_expectation_of_indicator_is_survival(const):
    # f(u) = 1{u >= 4} over midpoints, the tail point T_max counts as survival
    v = expect_f_tau(const, 0, 0.0, lambda u: (u >= 4.0).astype(float))
    assert v == pytest.approx(np.exp(-0.2 * 4.0), abs=1e-14)


def test_unit_price_is_one(hjm, cox):
    for s in (hjm, cox):
        rep = price_bd(s, unit_payoff(5.0))
        assert rep.estimate == pytest.approx(1.0, abs=1e-13)


@pytest.mark.parametrize("T", [1.0, 5.0, 10.0])
def test_survival_claim_on_constant_hazard(const, T):
    rep = price_bd(const, survival_claim(T))
    assert rep.estimate == pytest.approx(np.exp(-0.2 * T), abs=1e-14)
    assert rep.se < 1e-12


def test_nested_price_matches_constant_hazard(const):
    # E[1{tau >= T} | tau > t] = exp(-lambda (T - t))
    rep = price_bd(const, survival_claim(6.0), t=2.0, paths=[0, 1], m=8)
    assert rep.estimate == pytest.approx(np.exp(-0.2 * 4.0), abs=1e-13)


def test_after_default_price_of_theta_claim(const):
    pay = linear_capped(5.0, 10.0)
    rep = price_ad(const, pay, theta=2.0, t=3.0, paths=[0], m=4)
    assert rep.estimate == pytest.approx(0.8, abs=1e-13)


def test_nested_price_is_consistent_with_pooled_price(hjm):
    paths = np.arange(12)
    pay = survival_claim(6.0)
    nested = price_bd(hjm, pay, t=1.0, paths=paths, m=64)
    assert np.all(np.array(nested.per_path) >= 0) and np.all(np.array(nested.per_path) <= 1)
    assert nested.n_paths == 12 and nested.se > 0


def test_payoff_bound_is_enforced():
    p = Payoff(1.0, lambda u, w: 2.0 * np.ones_like(u), 1.0, "bad")
    with pytest.raises(ConfigError):
        p(np.zeros(3), 0.0)


def test_price_rejects_evaluation_after_maturity(const):
    with pytest.raises(ConfigError):
        price_bd(const, survival_claim(1.0), t=2.0)


def test_immersion_diagnostic(hjm, cox, const):
    assert check_immersion(cox) <= 1e-12
    assert check_immersion(const) <= 1e-12
    assert check_immersion(hjm) > 1e-3


@given(st.floats(0.0, 10.0), st.floats(0.5, 20.0))
def test_linear_capped_is_bounded(u, cap):
    v = linear_capped(5.0, cap)(np.array([u]), 0.0)
    assert 0.0 <= v[0] <= 1.0
