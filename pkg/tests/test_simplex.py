import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from hazardgen.simplex import minimize


def rosen(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))


def test_quadratic_minimum():
    res = minimize(lambda x: float(np.sum((x - [1.0, -2.0, 3.0]) ** 2)), [0.0, 0.0, 0.0], step=[1, 1, 1])
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, -2.0, 3.0], atol=1e-6)
    assert res.fun < 1e-12


def test_rosenbrock_agrees_with_scipy():
    res = minimize(rosen, [-1.2, 1.0], step=[0.5, 0.5], max_iter=2000)
    ref = optimize.minimize(rosen, [-1.2, 1.0], method="Nelder-Mead", options={"xatol": 1e-8, "fatol": 1e-8})
    assert res.converged
    np.testing.assert_allclose(res.x, ref.x, atol=1e-6)
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)


def test_infeasible_region_repels():
    # minimum of the unconstrained parabola lies where f is undefined
    def f(x):
        return np.inf if x[0] < 1.0 else (x[0] - 0.0) ** 2

    res = minimize(f, [3.0], step=[0.5])
    assert res.x[0] >= 1.0
    assert res.x[0] == pytest.approx(1.0, abs=1e-6)


def test_iteration_budget_reported():
    res = minimize(rosen, [-1.2, 1.0], max_iter=5)
    assert not res.converged
    assert res.iterations == 5
    assert res.evaluations > 5


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=4), st.lists(st.floats(-10, 10), min_size=4, max_size=4))
def test_never_worse_than_start(center, start):
    c = np.array(center)
    x0 = np.array(start[: c.size])
    f = lambda x: float(np.sum(np.abs(x - c) ** 1.5))
    res = minimize(f, x0, step=np.ones(c.size))
    assert res.fun <= f(x0)
    assert res.fun == pytest.approx(f(res.x))
