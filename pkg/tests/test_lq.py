import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import lq_spec_from, random_lq, riccati_reference
from stochsens import (IntegrationFailureError, InvalidArgumentError, LQSpec, SingularRiccatiError, SpecError,
                       TimeGrid, mc_cost, sample_brownian, solve_lq, value_duality_residual)
from stochsens.lq import discrete_cost, expected_cost, riccati_integrate, state_moments

SCALAR = dict(x0=[1.0], A=0.0, B=1.0, Q=0.0, N=1.0, M=1.0)


def test_scalar_riccati_closed_form():
    # P(t) = 1/(2 - t) solves -P' = -P^2 with P(1) = 1
    grid = TimeGrid(1.0, 1000)
    sol = solve_lq(LQSpec(**SCALAR), grid)
    np.testing.assert_allclose(sol.riccati.P[:, 0, 0], 1.0 / (2.0 - grid.times), rtol=1e-12)
    assert sol.value == pytest.approx(0.25, abs=1e-12)


def test_scalar_closed_loop_paths():
    # deterministic: x(t) = (2 - t)/2, p = 1/2, u = -1/2
    grid = TimeGrid(1.0, 200)
    sol = solve_lq(LQSpec(**SCALAR), grid, sample_brownian(grid, 3, 1, 0))
    np.testing.assert_allclose(sol.u_bar, -0.5, atol=1e-10)
    np.testing.assert_allclose(sol.p_bar, 0.5, atol=1e-10)
    np.testing.assert_allclose(sol.x_bar[0, :, 0], (2.0 - grid.times) / 2.0, atol=1e-10)


def test_rk4_fourth_order():
    errs = [abs(riccati_integrate(LQSpec(**SCALAR), TimeGrid(1.0, K)).P[0, 0, 0] - 0.5) for K in (4, 8, 16)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 3.7)


@pytest.mark.parametrize("seed,n,m,d", [(0, 2, 1, 1), (1, 3, 2, 2), (2, 1, 1, 2)])
def test_matches_adaptive_reference(seed, n, m, d):
    rng = np.random.default_rng(seed)
    coeffs, M, x0 = random_lq(rng, n, m, d)
    P0, phi0, c0 = riccati_reference(coeffs["A"], coeffs["B"], coeffs["C"], coeffs["D"], coeffs["e"],
                                     coeffs["f"], coeffs["Q"], coeffs["N"], M, 1.0)
    sol = solve_lq(lq_spec_from(coeffs, M, x0, d), TimeGrid(1.0, 400))
    np.testing.assert_allclose(sol.riccati.P[0], P0, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(sol.riccati.phi[0], phi0, rtol=1e-8, atol=1e-10)
    assert sol.riccati.c[0] == pytest.approx(c0, rel=1e-8, abs=1e-10)


def _random_spec(seed, n=2, m=2, d=2):
    coeffs, M, x0 = random_lq(np.random.default_rng(seed), n, m, d, smooth=False)
    return lq_spec_from(coeffs, M, x0, d)


@given(seed=st.integers(0, 10**5), n=st.integers(1, 3), m=st.integers(1, 3), d=st.integers(1, 2))
@settings(max_examples=15)
def test_riccati_symmetric_psd(seed, n, m, d):
    sol = solve_lq(_random_spec(seed, n, m, d), TimeGrid(1.0, 50))
    P = sol.riccati.P
    np.testing.assert_allclose(P, np.swapaxes(P, 1, 2), atol=1e-12)
    assert np.linalg.eigvalsh(P).min() >= -1e-10


def test_value_matches_monte_carlo_cost():
    spec = _random_spec(11)
    grid = TimeGrid(1.0, 400)
    sol = solve_lq(spec, grid, sample_brownian(grid, 20000, 2, 5))
    est = mc_cost(sol)
    # Euler cost carries an O(dt) bias on top of the sampling noise
    assert abs(est.mean - sol.value) <= 4 * est.stderr + 5 * grid.dt
    assert expected_cost(sol) == pytest.approx(sol.value, rel=1e-8)


def test_duality_residual_zero_mean():
    spec = _random_spec(12)
    grid = TimeGrid(1.0, 200)
    sol = solve_lq(spec, grid, sample_brownian(grid, 5000, 2, 6))
    assert value_duality_residual(spec, sol).within(0.0)


def test_optimal_control_is_first_order_stationary():
    spec = _random_spec(13, m=2)
    grid = TimeGrid(1.0, 200)
    W = sample_brownian(grid, 2000, 2, 7)
    sol = solve_lq(spec, grid, W)
    dW = W.increments
    u = sol.u_bar
    J0 = discrete_cost(spec, grid, dW, u)
    rng = np.random.default_rng(0)
    for _ in range(3):
        v = rng.normal(size=u.shape[1:])[None] * np.ones((u.shape[0], 1, 1))
        v2 = float(np.mean((v ** 2).sum(axis=(1, 2))) * grid.dt)
        for eps in (0.1, 0.05):
            assert (discrete_cost(spec, grid, dW, u + eps * v) - J0) / eps >= -10 * eps * v2


def test_state_moments_covariance_psd():
    mom = state_moments(solve_lq(_random_spec(14), TimeGrid(1.0, 100)))
    assert np.linalg.eigvalsh(mom.covariance).min() >= -1e-10


def test_rejects_singular_control_weight():
    grid = TimeGrid(1.0, 10)
    with pytest.raises(SpecError, match="uniformly positive definite"):
        LQSpec(**{**SCALAR, "N": 0.0}).sampled(grid)
    with pytest.raises(SpecError, match="uniformly positive definite"):
        LQSpec(x0=[1.0], B=[[1.0, 0.0]], N=np.diag([1.0, 0.0])).sampled(grid)
    with pytest.raises(SpecError):
        LQSpec(**{**SCALAR, "N": 0.5, "delta": 1.0}).sampled(grid)
    with pytest.raises(InvalidArgumentError):
        LQSpec(**{**SCALAR, "M": -1.0})
    with pytest.raises(InvalidArgumentError):
        LQSpec(x0=[1.0, 0.0], B=np.ones((2, 1)), N=1.0, Q=[[1.0, 2.0], [0.0, 1.0]]).sampled(grid)


def test_solver_errors():
    grid = TimeGrid(1.0, 50)
    with pytest.raises(SingularRiccatiError):
        solve_lq(LQSpec(**{**SCALAR, "N": 0.0, "allow_singular_control": True}), grid)
    with pytest.raises(IntegrationFailureError):
        solve_lq(LQSpec(x0=[1.0], A=40.0, B=1e-9, N=1.0, M=1.0), grid)


def test_ensemble_must_match():
    grid = TimeGrid(1.0, 10)
    with pytest.raises(InvalidArgumentError):
        solve_lq(LQSpec(**SCALAR), grid, sample_brownian(TimeGrid(1.0, 20), 5, 1, 0))
