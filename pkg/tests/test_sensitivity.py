import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import lq_spec_from, random_lq
from stochsens import (LQPerturbation, LQSpec, MVPerturbation, MVSpec, TimeGrid, check_lq, check_mv, dv_additive,
                       dv_lq, dv_mv, fd_check, linearity_check, sample_brownian)
from stochsens.timefn import PiecewiseConstant
from stochsens.sensitivity import default_tau, forward_quotient, lq_ray

SCALAR = LQSpec(x0=[1.0], A=0.0, B=1.0, Q=0.0, N=1.0, M=1.0)
GRID = TimeGrid(1.0, 1000)


# scalar instance: x(t) = (2 - t)/2, p = 1/2, u = -1/2, q = 0
@pytest.mark.parametrize("pert,expected", [
    (LQPerturbation(dx0=[1.0]), 0.5),
    (LQPerturbation(dA=1.0), 0.375),
    (LQPerturbation(dB=1.0), -0.25),
    (LQPerturbation(de=1.0), 0.5),
    (LQPerturbation(dC=[1.0]), 0.0),
    (LQPerturbation(dD=[1.0]), 0.0),
    (LQPerturbation(df=[1.0]), 0.0),
])
def test_scalar_lq_sensitivities(pert, expected):
    rep = check_lq(SCALAR, pert, GRID)
    assert rep.adjoint_value == pytest.approx(expected, abs=1e-10)
    assert rep.fd_value == pytest.approx(expected, abs=1e-7)


def test_zero_noise_blocks_are_exactly_zero():
    for pert in (LQPerturbation(dC=[1.0]), LQPerturbation(dD=[1.0]), LQPerturbation(df=[0.7])):
        assert dv_lq(SCALAR, pert, GRID).adjoint_value == 0.0


def test_breakdown_sums_to_total():
    spec = lq_spec_from(*random_lq(np.random.default_rng(0), 2, 2, 2), 2)
    pert = LQPerturbation(dx0=[1.0, 0.5], dA=np.eye(2), de=[0.2, 0.1], df=[[1.0, 0.0], [0.0, 1.0]])
    rep = dv_lq(spec, pert, TimeGrid(1.0, 200))
    assert set(rep.breakdown) == {"x0", "A", "B", "C", "D", "e", "f"}
    assert rep.adjoint_value == pytest.approx(sum(rep.breakdown.values()), rel=1e-14)


@pytest.mark.parametrize("block", ["dx0", "dA", "dB", "dC", "dD", "de", "df"])
def test_random_instance_matches_fd(block):
    rng = np.random.default_rng(21)
    n, m, d = 2, 2, 2
    spec = lq_spec_from(*random_lq(rng, n, m, d), d)
    shapes = {"dx0": (n,), "dA": (n, n), "dB": (n, m), "dC": (d, n, n), "dD": (d, n, m), "de": (n,), "df": (d, n)}
    val = rng.normal(size=shapes[block])
    if block in ("dC", "dD", "df"):
        val = list(val)
    rep = check_lq(spec, LQPerturbation(**{block: val}), TimeGrid(1.0, 200))
    assert rep.agrees(abs_tol=1e-6, rel_tol=1e-5)


def test_time_varying_direction():
    spec = lq_spec_from(*random_lq(np.random.default_rng(5), 2, 1, 1), 1)
    pert = LQPerturbation(dA=lambda t: np.sin(4 * t) * np.ones((2, 2)), de=PiecewiseConstant(np.ones((4, 2)) * [[1], [0], [-1], [2]], 1.0))
    assert check_lq(spec, pert, TimeGrid(1.0, 200)).agrees()


def test_monte_carlo_route_agrees_with_moments():
    spec = lq_spec_from(*random_lq(np.random.default_rng(6), 2, 2, 1), 1)
    grid = TimeGrid(1.0, 200)
    W = sample_brownian(grid, 20000, 1, 2)
    pert = LQPerturbation(dA=np.eye(2), dC=[np.ones((2, 2))], df=[[1.0, -1.0]])
    exact = dv_lq(spec, pert, grid)
    mc = dv_lq(spec, pert, grid, W, method="mc")
    assert mc.mc_stderr > 0
    assert abs(mc.adjoint_value - exact.adjoint_value) <= 4 * mc.mc_stderr + 0.02


def test_scalar_mc_route_is_first_order():
    W = sample_brownian(GRID, 4, 1, 0)
    rep = dv_lq(SCALAR, LQPerturbation(dA=1.0), GRID, W, method="mc")
    assert rep.adjoint_value == pytest.approx(0.375, abs=2 * GRID.dt)


def test_additive_noise_interface():
    spec = lq_spec_from(*random_lq(np.random.default_rng(7), 2, 1, 2), 2)
    grid = TimeGrid(1.0, 200)
    sig = np.array([[0.3, 0.0], [0.1, 0.2]])
    rep = dv_additive(spec, [1.0, 0.0], [0.5, -0.5], sig, grid)
    ref = dv_lq(spec, LQPerturbation(dx0=[1.0, 0.0], de=[0.5, -0.5], df=list(sig.T)), grid)
    assert rep.adjoint_value == pytest.approx(ref.adjoint_value, rel=1e-13)
    assert set(rep.breakdown) == {"x0", "drift", "diffusion"}


@given(alpha=st.floats(-2, 2), beta=st.floats(-2, 2))
@settings(max_examples=10)
def test_linearity_in_direction(alpha, beta):
    spec = lq_spec_from(*random_lq(np.random.default_rng(8), 2, 1, 1), 1)
    grid = TimeGrid(1.0, 100)
    p1 = LQPerturbation(dA=np.eye(2), df=[[1.0, 0.0]])
    p2 = LQPerturbation(dx0=[0.0, 1.0], dB=np.ones((2, 1)), dD=[[[1.0], [0.0]]])
    assert linearity_check(lambda p: dv_lq(spec, p, grid), p1, p2, alpha, beta)


# ------------------------------------------------------------------- MV


def _explicit(mu, sigma, x, A, T=1.0):
    theta = (mu / sigma) ** 2 * T
    e = np.exp(theta)
    k = 2.0 * (A - x) ** 2 * e / np.expm1(theta) ** 2
    return {"x": 2 * (x - A) / np.expm1(theta), "A": -2 * (x - A) / np.expm1(theta),
            "mu": -k * mu / sigma ** 2 * T, "sigma": k * mu ** 2 / sigma ** 3 * T}


@pytest.mark.parametrize("x,A,mu,sigma", [(0.0, 1.0, 0.1, 0.2), (0.5, 2.0, 0.08, 0.3), (1.0, 0.2, -0.1, 0.25)])
def test_mv_explicit_displays(x, A, mu, sigma):
    spec = MVSpec(x=x, r=0.0, A=A, mu=mu, sigma=sigma)
    ref = _explicit(mu, sigma, x, A)
    for key, pert in (("x", MVPerturbation(dx=1.0)), ("A", MVPerturbation(dA=1.0)),
                      ("mu", MVPerturbation(dmu=1.0)), ("sigma", MVPerturbation(dsigma=1.0))):
        rep = check_mv(spec, pert, GRID)
        assert rep.adjoint_value == pytest.approx(ref[key], rel=1e-8)
        assert rep.rel_gap < 1e-5


def test_mv_rate_sensitivity_identity():
    # D_r along a constant direction equals 2 R v + lambda R A - E int pi'1 p dr
    spec = MVSpec(x=0.2, r=0.03, A=1.5, mu=0.09, sigma=0.2)
    grid = TimeGrid(1.0, 400)
    rep = check_mv(spec, MVPerturbation(dr=1.0), grid)
    assert rep.agrees(rel_tol=1e-6)


def test_mv_two_assets_fd():
    spec = MVSpec(x=0.0, r=0.02, A=1.0, mu=[0.1, 0.07], sigma=[[0.2, 0.0], [0.05, 0.3]])
    grid = TimeGrid(1.0, 400)
    pert = MVPerturbation(dx=0.3, dr=0.5, dA=-1.0, dmu=[1.0, -1.0], dsigma=[[0.0, 1.0], [1.0, 0.5]])
    rep = check_mv(spec, pert, grid)
    assert rep.agrees(rel_tol=1e-6)
    assert set(rep.breakdown) == {"x", "r", "A", "mu", "sigma"}


def test_mv_multiplier_identity_exact():
    spec = MVSpec(x=0.0, r=0.0, A=1.0, mu=0.1, sigma=0.2)
    rep = dv_mv(spec, MVPerturbation(dA=1.0), GRID)
    from stochsens import solve_closed_form
    assert rep.adjoint_value == -solve_closed_form(spec, GRID).lambda_E


def test_mv_mc_route():
    spec = MVSpec(x=0.0, r=0.0, A=1.0, mu=0.1, sigma=0.2)
    grid = TimeGrid(1.0, 500)
    W = sample_brownian(grid, 20000, 1, 5)
    pert = MVPerturbation(dmu=1.0, dsigma=1.0)
    exact = dv_mv(spec, pert, grid)
    mc = dv_mv(spec, pert, grid, W, method="mc")
    assert abs(mc.adjoint_value - exact.adjoint_value) <= 4 * mc.mc_stderr + 0.01 * abs(exact.adjoint_value)


# ------------------------------------------------------------ FD harness


@given(c=st.lists(st.floats(-5, 5), min_size=4, max_size=4), tau=st.floats(1e-3, 1e-1))
def test_fd_check_on_polynomials(c, tau):
    f = lambda s: c[0] + c[1] * s + c[2] * s ** 2 + c[3] * s ** 3  # noqa: E731
    central, rich = fd_check(f, tau)
    assert central == pytest.approx(c[1] + c[3] * tau ** 2, abs=1e-8)
    assert rich == pytest.approx(c[1], abs=1e-7)


def test_forward_quotient_and_tau():
    assert forward_quotient(lambda s: 3 * s + s * s, 1e-3) == pytest.approx(3.001)
    assert default_tau(10.0, 2.0) == pytest.approx(5e-4)
    assert default_tau(0.1, 0.0) == 1e-4


def test_zero_noise_fd_scales_linearly():
    ray = lq_ray(SCALAR, LQPerturbation(dC=[1.0]), GRID)
    base = ray(0.0)
    taus = np.array([1e-2, 1e-3, 1e-4])
    q = np.array([forward_quotient(ray, t, base) for t in taus])
    slope = np.polyfit(np.log(taus), np.log(np.abs(q)), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.05)
