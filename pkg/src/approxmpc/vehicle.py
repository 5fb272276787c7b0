"""Kinematic bicycle model in Cartesian and track-relative (curvilinear) coordinates.

State layouts used throughout the package:

    Cartesian    [p_x, p_y, psi, v]
    curvilinear  [s, n, alpha, v]
    input        [v_u, delta]

Sign convention: ``n`` is positive to the left of the path tangent and the
curvature is positive for left turns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .track import CurvatureProfile, curvature_at

EPS_SING = 1e-6


class SingularityError(ArithmeticError):
    """The vehicle sits at (or beyond) the local center of curvature."""


class CartesianState(NamedTuple):
    p_x: float
    p_y: float
    psi: float
    v: float


class CurvilinearState(NamedTuple):
    s: float
    n: float
    alpha: float
    v: float


class ControlInput(NamedTuple):
    v_u: float
    delta: float


@dataclass(frozen=True)
class VehicleParams:
    L: float = 0.16
    T: float = 0.1
    Ts: float = 0.01

    def __post_init__(self):
        if not (self.L > 0 and self.T > 0 and self.Ts > 0):
            raise ValueError(f"vehicle parameters must be positive, got {self}")


def curvilinear_rhs(x, u, kappa: float, params: VehicleParams) -> np.ndarray:
    """Time derivative of the curvilinear state for a given local curvature."""
    _, n, alpha, v = x
    v_u, delta = u
    den = 1.0 - n * kappa
    if den <= EPS_SING:
        raise SingularityError(f"1 - n*kappa = {den:.3e} (n={n}, kappa={kappa})")
    s_dot = v * math.cos(alpha) / den
    return np.array(
        [
            s_dot,
            v * math.sin(alpha),
            v / params.L * math.tan(delta) - kappa * s_dot,
            (v_u - v) / params.T,
        ]
    )


def curvilinear_dynamics(x, u, profile: CurvatureProfile, params: VehicleParams) -> np.ndarray:
    """Curvilinear kinematic bicycle with the curvature looked up at the current arc length."""
    return curvilinear_rhs(x, u, curvature_at(profile, x[0]), params)


def cartesian_dynamics(x, u, params: VehicleParams) -> np.ndarray:
    _, _, psi, v = x
    v_u, delta = u
    return np.array(
        [
            v * math.cos(psi),
            v * math.sin(psi),
            v * math.tan(delta) / params.L,
            (v_u - v) / params.T,
        ]
    )


def discretize(f: Callable, x, u, Ts: float) -> np.ndarray:
    """One classical RK4 step of ``x' = f(x, u)`` with ``u`` held over ``Ts``."""
    x = np.asarray(x, dtype=float)
    if Ts == 0.0:
        return x.copy()
    k1 = f(x, u)
    k2 = f(x + 0.5 * Ts * k1, u)
    k3 = f(x + 0.5 * Ts * k2, u)
    k4 = f(x + Ts * k3, u)
    return x + Ts / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def feedforward(kappa: float, r_v: float, L: float) -> ControlInput:
    """Input that keeps the vehicle on a path of constant curvature at speed ``r_v``."""
    return ControlInput(r_v, math.atan(L * kappa))
