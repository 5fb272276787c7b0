import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from approxmpc.track import (
    CurvatureProfile,
    InconsistentTrackError,
    ProjectionError,
    benchmark_profile,
    builtin_profile,
    centerline_from_curvature,
    circle_profile,
    constant_profile,
    curvature_at,
    load_track,
    save_track,
    wrap_angle,
    wrap_s,
)


def test_profile_validation():
    with pytest.raises(ValueError):
        CurvatureProfile([0.0, 1.0, 1.0], [0, 0, 0])
    with pytest.raises(ValueError):
        CurvatureProfile([0.5, 1.0], [0, 0])
    with pytest.raises(ValueError):
        CurvatureProfile([0.0, 1.0], [0.0, 1.0], closed=True)
    with pytest.raises(ValueError):
        CurvatureProfile([0.0], [0.0])


def test_curvature_lookup_examples():
    assert curvature_at(constant_profile(0.5, 10.0), 3.7) == 0.5
    tri = CurvatureProfile(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 0.0]))
    assert curvature_at(tri, 0.5) == 0.5
    closed = CurvatureProfile(np.array([0.0, 4.0, 10.0]), np.array([0.0, 2.0, 0.0]), closed=True)
    assert curvature_at(closed, 12.5) == pytest.approx(curvature_at(closed, 2.5), abs=1e-15)


def test_open_profile_clamps():
    tri = CurvatureProfile(np.array([0.0, 1.0, 2.0]), np.array([0.3, 1.0, 0.7]))
    assert curvature_at(tri, 5.0) == 0.7
    assert curvature_at(tri, -1.0) == 0.3


def test_curvature_rejects_nonfinite():
    with pytest.raises(ValueError):
        curvature_at(constant_profile(0.0, 1.0), float("nan"))


def test_wrap_s():
    p = constant_profile(0.0, 10.0, closed=True)
    assert wrap_s(p, 10.0) == 0.0
    assert wrap_s(p, 3.2) == 3.2
    assert wrap_s(p, 23.2) == pytest.approx(3.2, abs=1e-12)
    assert wrap_s(p, -0.5) == pytest.approx(9.5)
    with pytest.raises(ValueError):
        wrap_s(constant_profile(0.0, 10.0), 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 11.0), st.floats(1e-6, 0.1))
def test_curvature_lipschitz(s, eps):
    p = benchmark_profile()
    slopes = np.abs(np.diff(p.kappas) / np.diff(p.breakpoints))
    assert abs(curvature_at(p, s + eps) - curvature_at(p, s)) <= slopes.max() * eps + 1e-12


def test_centerline_straight_line():
    line = centerline_from_curvature(constant_profile(0.0, 5.0))
    assert_allclose([line.p_x[-1], line.p_y[-1], line.theta[-1]], [5.0, 0.0, 0.0], atol=1e-12)


def test_centerline_circle_closes():
    line = centerline_from_curvature(circle_profile(1.0))
    assert_allclose([line.p_x[-1], line.p_y[-1]], [0.0, 0.0], atol=1e-9)
    assert line.theta[-1] == pytest.approx(2 * math.pi, abs=1e-12)


def test_centerline_heading_is_integrated_curvature():
    line = centerline_from_curvature(constant_profile(0.5, 5.0))
    assert line.pose_at(math.pi)[2] == pytest.approx(math.pi / 2, abs=1e-12)


def test_centerline_rejects_unclosed_loop():
    with pytest.raises(InconsistentTrackError):
        centerline_from_curvature(constant_profile(0.5, 5.0, closed=True))
    with pytest.raises(ValueError):
        centerline_from_curvature(constant_profile(0.0, 1.0), ds=0.0)


def test_benchmark_track_properties():
    p = benchmark_profile()
    assert p.closed
    assert np.max(np.abs(p.kappas)) <= 1.2
    assert 11.0 < p.total_length < 13.0
    line = centerline_from_curvature(p)
    gap = math.hypot(line.p_x[-1] - line.p_x[0], line.p_y[-1] - line.p_y[0])
    assert gap <= 1e-3 * p.total_length
    assert line.theta[-1] == pytest.approx(2 * math.pi, abs=1e-9)


def test_curvature_recovered_from_heading():
    p = benchmark_profile()
    line = centerline_from_curvature(p, ds=0.01)
    mid = 0.5 * (line.s[1:] + line.s[:-1])
    k_fd = np.diff(line.theta) / np.diff(line.s)
    assert np.max(np.abs(k_fd - curvature_at(p, mid))) <= 1e-2


def test_projection_examples():
    line = centerline_from_curvature(constant_profile(0.0, 5.0))
    assert_allclose(line.project((0.0, 0.0, 0.0, 0.4)), (0.0, 0.0, 0.0, 0.4), atol=1e-14)
    assert_allclose(line.project((1.0, 0.1, 0.0, 0.4)), (1.0, 0.1, 0.0, 0.4), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 2 * math.pi - 1e-3), st.floats(-0.5, 0.5), st.floats(-1.0, 1.0))
def test_circle_round_trip(s, n, alpha):
    line = centerline_from_curvature(circle_profile(1.0))
    back = line.project(line.to_cartesian((s, n, alpha, 0.5)), s_hint=s)
    ds = (back[0] - s + math.pi) % (2 * math.pi) - math.pi
    assert abs(ds) <= 1e-6
    assert_allclose(back[1:], (n, alpha, 0.5), atol=1e-6)


def test_projection_outside_validity_region():
    line = centerline_from_curvature(circle_profile(1.0))
    with pytest.raises(ProjectionError):
        line.project((0.0, 1.0, 0.0, 0.5))  # circle center


def test_projection_tie_prefers_smaller_s():
    # point equidistant from both ends of a half circle: the center-facing tie
    line = centerline_from_curvature(constant_profile(0.0, 2.0))
    assert line._nearest_sample(1.0, 0.0, None, 0.5) == int(np.searchsorted(line.s, 1.0))


def test_track_file_round_trip(tmp_path):
    p = benchmark_profile()
    save_track(p, tmp_path / "t.yaml")
    assert load_track(tmp_path / "t.yaml") == p
    (tmp_path / "b.yaml").write_text("track: circle\n")
    assert load_track(tmp_path / "b.yaml") == builtin_profile("circle")
    with pytest.raises(ValueError):
        builtin_profile("nope")


def test_centerline_csv(tmp_path):
    line = centerline_from_curvature(circle_profile(1.0), ds=0.1)
    line.to_csv(tmp_path / "c.csv")
    head = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert head == "s,p_x,p_y,theta,kappa"
