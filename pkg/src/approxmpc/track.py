"""Track geometry: curvature lookup tables, centerlines and frame projections."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import yaml


class ProjectionError(ValueError):
    """A Cartesian pose cannot be projected onto the centerline."""


class InconsistentTrackError(ValueError):
    """A closed curvature profile does not integrate to a closed curve."""


@dataclass(frozen=True, eq=False)
class CurvatureProfile:
    """Arc-length indexed curvature table, linearly interpolated."""

    breakpoints: np.ndarray
    kappas: np.ndarray
    closed: bool = False

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        kp = np.asarray(self.kappas, dtype=float)
        if bp.ndim != 1 or bp.shape != kp.shape or bp.size < 2:
            raise ValueError("breakpoints and kappas must be 1-D arrays of equal length >= 2")
        if bp[0] != 0.0:
            raise ValueError("first breakpoint must be 0")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if not (np.all(np.isfinite(bp)) and np.all(np.isfinite(kp))):
            raise ValueError("profile contains non-finite values")
        if self.closed and kp[0] != kp[-1]:
            raise ValueError("closed profile must have kappas[0] == kappas[-1]")
        bp.setflags(write=False)
        kp.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "kappas", kp)
        object.__setattr__(self, "closed", bool(self.closed))

    @property
    def total_length(self) -> float:
        return float(self.breakpoints[-1])

    def __eq__(self, other):
        if not isinstance(other, CurvatureProfile):
            return NotImplemented
        return (
            self.closed == other.closed
            and np.array_equal(self.breakpoints, other.breakpoints)
            and np.array_equal(self.kappas, other.kappas)
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "breakpoints": [float(b) for b in self.breakpoints],
            "kappas": [float(k) for k in self.kappas],
            "closed": self.closed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CurvatureProfile":
        return cls(np.asarray(d["breakpoints"], float), np.asarray(d["kappas"], float), bool(d.get("closed", False)))


def curvature_at(profile: CurvatureProfile, s):
    """Curvature at arc length ``s`` (scalar or array).

    Closed profiles wrap ``s``; open profiles clamp to the end values.
    """
    s_arr = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s_arr)):
        raise ValueError(f"non-finite arc length {s!r}")
    if profile.closed:
        s_arr = np.mod(s_arr, profile.total_length)
    k = np.interp(s_arr, profile.breakpoints, profile.kappas)
    return float(k) if k.ndim == 0 else k


def wrap_s(profile: CurvatureProfile, s: float) -> float:
    if not profile.closed:
        raise ValueError("wrap_s is only defined for closed profiles")
    out = math.fmod(s, profile.total_length)
    if out < 0.0:
        out += profile.total_length
    # fmod can return total_length itself after the negative shift
    return 0.0 if out >= profile.total_length else out


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    out = math.remainder(a, 2.0 * math.pi)
    return math.pi if out == -math.pi else out


def constant_profile(kappa: float, length: float, closed: bool = False) -> CurvatureProfile:
    return CurvatureProfile(np.array([0.0, length]), np.array([kappa, kappa]), closed)


def circle_profile(radius: float) -> CurvatureProfile:
    return constant_profile(1.0 / radius, 2.0 * math.pi * radius, closed=True)


def _segments_to_profile(segments, closed: bool) -> CurvatureProfile:
    """Build a table from (length, kappa_end) pieces, starting at curvature 0."""
    s, k = [0.0], [0.0]
    for length, kappa_end in segments:
        s.append(s[-1] + length)
        k.append(kappa_end)
    return CurvatureProfile(np.array(s), np.array(k), closed)


def benchmark_profile() -> CurvatureProfile:
    """Closed stadium track with an S-bend on each straight, |kappa| <= 1.2.

    The second half repeats the first; a half that turns by pi then closes
    the loop by point symmetry.
    """
    ramp = 0.3
    turn_ramp = 0.4
    turn_hold = math.pi / 1.2 - turn_ramp
    half = [
        (0.5, 0.0),
        (ramp, 1.0), (0.4, 1.0), (ramp, 0.0),
        (ramp, -1.0), (0.4, -1.0), (ramp, 0.0),
        (0.4, 0.0),
        (turn_ramp, 1.2), (turn_hold, 1.2), (turn_ramp, 0.0),
        (0.3, 0.0),
    ]
    return _segments_to_profile(half + half, closed=True)


def builtin_profile(name: str) -> CurvatureProfile:
    if name == "benchmark":
        return benchmark_profile()
    if name == "circle":
        return circle_profile(1.0)
    if name == "straight":
        return constant_profile(0.0, 50.0)
    raise ValueError(f"unknown builtin track {name!r}")


def load_track(path) -> CurvatureProfile:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if "track" in doc and isinstance(doc["track"], (dict, str)):
        doc = doc["track"]
    if isinstance(doc, str):
        return builtin_profile(doc)
    return CurvatureProfile.from_dict(doc)


def save_track(profile: CurvatureProfile, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(profile.to_dict(), fh, sort_keys=False)


def _heading_rhs(theta: float, kappa: float):
    return math.cos(theta), math.sin(theta), kappa


@dataclass(eq=False)
class Centerline:
    """Sampled Cartesian centerline of a curvature profile, starting at pose (0, 0, 0)."""

    profile: CurvatureProfile
    s: np.ndarray
    p_x: np.ndarray
    p_y: np.ndarray
    theta: np.ndarray
    kappa: np.ndarray = field(repr=False)

    @property
    def total_length(self) -> float:
        return self.profile.total_length

    def _rk4(self, s0: float, pose, h: float):
        x, y, th = pose
        k_a = curvature_at(self.profile, s0)
        k_m = curvature_at(self.profile, s0 + 0.5 * h)
        k_b = curvature_at(self.profile, s0 + h)
        c1 = _heading_rhs(th, k_a)
        c2 = _heading_rhs(th + 0.5 * h * c1[2], k_m)
        c3 = _heading_rhs(th + 0.5 * h * c2[2], k_m)
        c4 = _heading_rhs(th + h * c3[2], k_b)
        return (
            x + h / 6.0 * (c1[0] + 2 * c2[0] + 2 * c3[0] + c4[0]),
            y + h / 6.0 * (c1[1] + 2 * c2[1] + 2 * c3[1] + c4[1]),
            th + h / 6.0 * (c1[2] + 2 * c2[2] + 2 * c3[2] + c4[2]),
        )

    def pose_at(self, s: float):
        """(p_x, p_y, theta) of the centerline at arc length ``s``."""
        if self.profile.closed:
            s = wrap_s(self.profile, s)
        j = int(np.searchsorted(self.s, s, side="right")) - 1
        j = min(max(j, 0), self.s.size - 1)
        h = s - self.s[j]
        pose = (self.p_x[j], self.p_y[j], self.theta[j])
        if h == 0.0:
            return pose
        return self._rk4(self.s[j], pose, h)

    def to_cartesian(self, x) -> tuple:
        s, n, alpha, v = x
        cx, cy, th = self.pose_at(s)
        return (cx - n * math.sin(th), cy + n * math.cos(th), th + alpha, v)

    def _nearest_sample(self, p_x: float, p_y: float, s_hint, window: float) -> int:
        d2 = (self.p_x - p_x) ** 2 + (self.p_y - p_y) ** 2
        if s_hint is not None:
            ds = np.abs(self.s - s_hint)
            if self.profile.closed:
                ds = np.minimum(ds, self.total_length - ds)
            d2 = np.where(ds <= window, d2, np.inf)
        # argmin returns the first (smallest s) of tied minima
        return int(np.argmin(d2))

    def project(self, x, s_hint=None, window: float = 0.5):
        """Project a Cartesian state ``[p_x, p_y, psi, v]`` to ``[s, n, alpha, v]``."""
        p_x, p_y, psi, v = x
        j = self._nearest_sample(p_x, p_y, s_hint, window)
        s = float(self.s[j])
        n = 0.0
        for _ in range(30):
            cx, cy, th = self.pose_at(s)
            dx, dy = p_x - cx, p_y - cy
            ct, st = math.cos(th), math.sin(th)
            tang = dx * ct + dy * st
            n = -dx * st + dy * ct
            den = 1.0 - n * curvature_at(self.profile, s)
            if den <= 1e-6:
                raise ProjectionError(f"point ({p_x}, {p_y}) outside projection validity region")
            step = tang / den
            s += step
            if abs(step) < 1e-13:
                break
        cx, cy, th = self.pose_at(s)
        n = -(p_x - cx) * math.sin(th) + (p_y - cy) * math.cos(th)
        if self.profile.closed:
            s = wrap_s(self.profile, s)
        return (s, n, wrap_angle(psi - th), v)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "p_x", "p_y", "theta", "kappa"])
            for row in zip(self.s, self.p_x, self.p_y, self.theta, self.kappa):
                w.writerow([repr(float(v)) for v in row])


def centerline_from_curvature(profile: CurvatureProfile, ds: float = 0.01) -> Centerline:
    """Integrate the heading along the profile with RK4.

    The sample grid is the uniform grid of step ``ds`` merged with the table
    breakpoints, so every step sees a linear curvature segment.
    """
    if not ds > 0:
        raise ValueError("ds must be positive")
    length = profile.total_length
    m = max(1, int(math.ceil(length / ds - 1e-9)))
    grid = np.union1d(np.linspace(0.0, length, m + 1), profile.breakpoints)
    xs = np.empty_like(grid)
    ys = np.empty_like(grid)
    ths = np.empty_like(grid)
    xs[0] = ys[0] = ths[0] = 0.0
    line = Centerline(profile, grid, xs, ys, ths, curvature_at(profile, grid))
    pose = (0.0, 0.0, 0.0)
    for i in range(1, grid.size):
        pose = line._rk4(grid[i - 1], pose, grid[i] - grid[i - 1])
        xs[i], ys[i], ths[i] = pose
    if profile.closed:
        # curvature_at wraps, so re-evaluate the seam sample without wrapping
        line.kappa[-1] = profile.kappas[-1]
        gap = math.hypot(xs[-1], ys[-1])
        if gap > 1e-3 * length:
            raise InconsistentTrackError(f"closed track ends {gap:.4g} m away from its start")
    return line
