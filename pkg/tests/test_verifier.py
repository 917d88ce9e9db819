import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dden.calculus import linear_capped, survival_claim, unit_payoff
from dden.verifier import (TestDictionary, cellwise_constant_mean, chi_square_gof,
                           pricing_cross_check, sample_default, test_constant_mean,
                           test_orthogonal_increments)


def _brownian(rng, n=4000, N=50, T=1.0):
    dW = rng.standard_normal((n, N)) * np.sqrt(T / N)
    W = np.zeros((n, N + 1))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    return W


def test_brownian_motion_passes(rng):
    rep = test_constant_mean(_brownian(rng))
    assert rep.passed and rep.max_dev < 4.0
    assert "family-wise" in rep.note


def test_drifted_brownian_motion_fails(rng):
    W = _brownian(rng)
    t = np.linspace(0, 1, W.shape[1])
    assert not test_constant_mean(W + 0.2 * t).passed


def test_deterministic_processes_use_exact_comparison():
    x = np.ones((10, 5))
    rep = test_constant_mean(x)
    assert rep.passed and rep.exact
    t = np.broadcast_to(np.arange(5.0), (10, 5))
    rep = test_constant_mean(t)
    assert not rep.passed and rep.max_dev == np.inf


def test_nan_entries_are_excluded(rng):
    W = _brownian(rng)
    W[:10, 20:] = np.nan
    assert test_constant_mean(W).passed


def test_orthogonality_dictionary(rng):
    W = _brownian(rng)
    res = test_orthogonal_increments(W, W, TestDictionary.default(), 10, 40, 10 / 50)
    assert all(r["passed"] for r in res)
    # X_t = W_t^2 has a mean drift picked up by the constant function
    res = test_orthogonal_increments(W ** 2, W, TestDictionary.default(), 10, 40, 10 / 50)
    assert not all(r["passed"] for r in res)


def test_cellwise_rule(rng):
    X = rng.standard_normal((3000, 40))
    stat = cellwise_constant_mean(X, 0.0, 4.0)
    assert stat["pass_fraction"] >= 0.95
    stat = cellwise_constant_mean(X + 0.5, 0.0, 4.0)
    assert stat["pass_fraction"] == 0.0


def test_sampled_default_times_follow_the_constant_law(const):
    smp = sample_default(const, n_draws=5)
    assert chi_square_gof(smp, const) > 1e-3
    tau = smp.tau[np.isfinite(smp.tau)]
    # truncated exponential mean on [0, 10]
    lam, T = 0.2, 10.0
    mean = (1 / lam - (T + 1 / lam) * np.exp(-lam * T)) / (1 - np.exp(-lam * T))
    assert tau.mean() == pytest.approx(mean, abs=4 * tau.std() / np.sqrt(tau.size))
    beyond = np.mean(~np.isfinite(smp.tau))
    assert beyond == pytest.approx(np.exp(-2.0), abs=4 * np.sqrt(np.exp(-2.0) / smp.tau.size))


def test_sampling_is_reproducible_and_tagged(hjm):
    a = sample_default(hjm, tag=1)
    b = sample_default(hjm, tag=1)
    c = sample_default(hjm, tag=2)
    np.testing.assert_array_equal(a.tau, b.tau)
    assert not np.array_equal(a.tau, c.tau)


@pytest.mark.parametrize("payoff", [unit_payoff(5.0), survival_claim(5.0), linear_capped(5.0, 10.0)])
def test_pricing_cross_check(hjm, payoff):
    assert pricing_cross_check(hjm, payoff)["passed"]


@given(st.floats(0.1, 100.0), st.floats(-5.0, 5.0))
def test_deviation_is_affine_invariant(scale, shift):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((200, 6)).cumsum(axis=1)
    a = test_constant_mean(X).max_dev
    b = test_constant_mean(scale * X + shift).max_dev
    assert b == pytest.approx(a, rel=1e-9)
