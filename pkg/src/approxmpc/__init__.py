"""Gaussian-process approximation of a curvilinear trajectory-tracking MPC for a kinematic bicycle."""

from .controller import ApproxController, approx_policy
from .gp import GpHyperparams, GpModel, fit_alpha, nn_kernel, posterior_mean_fast
from .ocp import OcpParams, OcpSolution, OcpSolver, solve_ocp
from .track import CurvatureProfile, builtin_profile, centerline_from_curvature, curvature_at
from .vehicle import CartesianState, ControlInput, CurvilinearState, VehicleParams

__version__ = "0.1.0"

__all__ = [
    "ApproxController", "approx_policy", "GpHyperparams", "GpModel", "fit_alpha", "nn_kernel",
    "posterior_mean_fast", "OcpParams", "OcpSolution", "OcpSolver", "solve_ocp", "CurvatureProfile",
    "builtin_profile", "centerline_from_curvature", "curvature_at", "CartesianState", "ControlInput",
    "CurvilinearState", "VehicleParams",
]
