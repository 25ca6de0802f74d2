import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochsens.core import TimeGrid
from stochsens.errors import InvalidArgumentError, UnsupportedFeatureError
from stochsens.timefn import (Constant, FromCallable, Mapped, PiecewiseConstant, as_time_function,
                              cumulative_stage_integral, integrate)


def test_constant_samples_every_stage():
    f = Constant([[1.0, 2.0], [3.0, 4.0]])
    s = f.sample(TimeGrid(2.0, 5))
    assert s.shape == (5, 3, 2, 2)
    np.testing.assert_array_equal(s[3, 1], [[1.0, 2.0], [3.0, 4.0]])


def test_callable_stage_times():
    f = FromCallable(lambda t: t, ())
    s = f.sample(TimeGrid(1.0, 4))
    np.testing.assert_allclose(s[2], [0.5, 0.625, 0.75])


def test_callable_reshapes_matching_size():
    f = FromCallable(lambda t: [t, 2 * t], (2, 1))
    assert f(1.0).shape == (2, 1)


def test_random_coefficients_rejected():
    with pytest.raises(UnsupportedFeatureError):
        FromCallable(lambda t: np.ones((10, 2)), (2,))


def test_nan_rejected():
    with pytest.raises(InvalidArgumentError):
        Constant([np.nan])
    with pytest.raises(InvalidArgumentError):
        FromCallable(lambda t: np.nan, ())


def test_piecewise_constant_uses_step_midpoint():
    f = PiecewiseConstant([1.0, 2.0, 3.0, 4.0], 1.0)
    s = f.sample(TimeGrid(1.0, 4))
    np.testing.assert_array_equal(s[:, 0], [1, 2, 3, 4])
    np.testing.assert_array_equal(s[:, 2], [1, 2, 3, 4])
    assert f(0.99) == 4.0 and f(1.0) == 4.0


def test_as_time_function_forms():
    T = 1.0
    assert isinstance(as_time_function(None, (2,)), Constant)
    assert as_time_function(3.0, (1, 1))(0.3).shape == (1, 1)
    assert isinstance(as_time_function(np.ones((1, 2)), (2,)), Constant)
    assert isinstance(as_time_function(np.ones((5, 2)), (2,), horizon=T), PiecewiseConstant)
    with pytest.raises(InvalidArgumentError):
        as_time_function(np.ones((5, 2)), (2,))
    with pytest.raises(InvalidArgumentError):
        as_time_function(np.ones(3), (2,))


def test_arithmetic():
    f = Constant(2.0) * 3.0 - Constant(1.0)
    assert float(f(0.1)) == 5.0
    g = Mapped(FromCallable(lambda t: t, ()), np.exp, ())
    np.testing.assert_allclose(g.sample(TimeGrid(1.0, 2))[1, 2], np.e)


@given(c=st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_simpson_is_exact_for_cubics(c):
    f = FromCallable(lambda t: c[0] + c[1] * t + c[2] * t ** 2 + c[3] * t ** 3, ())
    exact = c[0] * 2 + c[1] * 2 + c[2] * 8 / 3 + c[3] * 4
    assert integrate(f, TimeGrid(2.0, 3)).sum() == pytest.approx(exact, abs=1e-12)


@given(c=st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_cumulative_integral_exact_for_quintics(c):
    grid = TimeGrid(1.5, 4)
    poly = np.polynomial.Polynomial(c)
    prim = poly.integ()
    out = cumulative_stage_integral(lambda t: poly(t), grid)
    times = grid.dt * (np.arange(4)[:, None] + np.array([0.0, 0.5, 1.0])[None])
    np.testing.assert_allclose(out, prim(times) - prim(0.0), atol=1e-11)


def test_cumulative_integral_of_piecewise_constant():
    f = PiecewiseConstant([1.0, -2.0], 1.0)
    out = cumulative_stage_integral(f, TimeGrid(1.0, 4))
    np.testing.assert_allclose(out[:, 2], [0.25, 0.5, 0.0, -0.5], atol=1e-14)


def test_vectorised_at_matches_pointwise():
    fns = [Constant([1.0, 2.0]), PiecewiseConstant(np.arange(6.0).reshape(3, 2), 1.0),
           Constant([1.0, 2.0]) + PiecewiseConstant(np.arange(6.0).reshape(3, 2), 1.0)]
    t = np.linspace(0, 1, 11)
    for f in fns:
        np.testing.assert_array_equal(f.at(t), np.stack([f(x) for x in t]))
