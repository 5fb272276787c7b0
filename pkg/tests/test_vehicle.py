import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from approxmpc.track import constant_profile
from approxmpc.vehicle import (
    ControlInput,
    SingularityError,
    VehicleParams,
    cartesian_dynamics,
    curvilinear_dynamics,
    curvilinear_rhs,
    discretize,
    feedforward,
)

VP = VehicleParams()


def test_params_defaults_and_validation():
    assert (VP.L, VP.T, VP.Ts) == (0.16, 0.1, 0.01)
    with pytest.raises(ValueError):
        VehicleParams(L=0.0)
    with pytest.raises(ValueError):
        VehicleParams(T=-1.0)


def test_curvilinear_straight_equilibrium():
    dx = curvilinear_dynamics([0, 0, 0, 0.5], [0.5, 0.0], constant_profile(0.0, 10.0), VP)
    assert_allclose(dx, [0.5, 0, 0, 0], atol=1e-15)


def test_curvilinear_feedforward_holds_heading():
    u = (0.5, math.atan(VP.L * 1.0))
    dx = curvilinear_dynamics([0, 0, 0, 0.5], u, constant_profile(1.0, 10.0), VP)
    assert_allclose(dx, [0.5, 0, 0, 0], atol=1e-15)


def test_curvilinear_arc_length_rate_with_offset():
    dx = curvilinear_dynamics([0, 0.1, 0, 0.5], [0.3, 0.1], constant_profile(1.0, 10.0), VP)
    assert dx[0] == pytest.approx(0.5 / 0.9, rel=1e-14)


def test_curvilinear_singularity():
    with pytest.raises(SingularityError):
        curvilinear_rhs([0, 1.0, 0, 0.5], [0.5, 0.0], 1.0, VP)
    with pytest.raises(SingularityError):
        curvilinear_rhs([0, 2.0, 0, 0.5], [0.5, 0.0], 1.0, VP)


def test_cartesian_examples():
    assert_allclose(cartesian_dynamics([0, 0, 0, 1], [1, 0], VP), [1, 0, 0, 0])
    assert_allclose(cartesian_dynamics([0, 0, math.pi / 2, 1], [1, 0], VP), [0, 1, 0, 0], atol=1e-15)
    d = cartesian_dynamics([0, 0, 0, 0.5], [0.5, 12 * math.pi / 180], VP)
    assert d[2] == pytest.approx(0.5 * math.tan(12 * math.pi / 180) / 0.16, rel=1e-14)
    assert d[2] == pytest.approx(0.6644, abs=1e-3)


def test_rk4_constant_derivative_exact():
    prof = constant_profile(0.0, 10.0)
    f = lambda x, u: curvilinear_dynamics(x, u, prof, VP)  # noqa: E731
    assert_allclose(discretize(f, [0, 0, 0, 0.5], [0.5, 0], 0.01), [0.005, 0, 0, 0.5], atol=1e-16)


def test_rk4_first_order_lag():
    f = lambda x, u: cartesian_dynamics(x, u, VP)  # noqa: E731
    v = discretize(f, [0, 0, 0, 0.0], [1.0, 0.0], 0.01)[3]
    assert v == pytest.approx(1 - math.exp(-0.1), abs=1e-6)
    # relative error < 1e-6 for Ts/T <= 0.1 over many steps
    x = np.zeros(4)
    for k in range(1, 51):
        x = discretize(f, x, [1.0, 0.0], 0.01)
        exact = 1 - math.exp(-k * 0.01 / 0.1)
        assert abs(x[3] - exact) <= 1e-6 * exact


def test_rk4_zero_step_is_identity():
    f = lambda x, u: cartesian_dynamics(x, u, VP)  # noqa: E731
    x = np.array([1.0, 2.0, 3.0, 0.4])
    out = discretize(f, x, [1.0, 0.2], 0.0)
    assert_allclose(out, x)
    assert out is not x


def test_feedforward():
    assert feedforward(0.0, 0.5, 0.16) == ControlInput(0.5, 0.0)
    ff = feedforward(1.0, 0.5, 0.16)
    assert ff.v_u == 0.5 and ff.delta == pytest.approx(0.15866, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5))
def test_feedforward_odd(kappa):
    assert feedforward(-kappa, 0.5, 0.16).delta == -feedforward(kappa, 0.5, 0.16).delta


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.3, 1.3), st.floats(0.05, 1.2))
def test_feedforward_zeroes_heading_rate_on_path(kappa, v):
    dx = curvilinear_rhs([0, 0, 0, v], [v, math.atan(VP.L * kappa)], kappa, VP)
    assert abs(dx[2]) <= 1e-12
    assert abs(dx[1]) == 0.0
