"""Deployable approximate control law: curvature feedforward plus GP residual."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gp import GpModel, posterior_mean_fast
from .ocp import OcpParams
from .vehicle import ControlInput, VehicleParams, feedforward

MODEL_FILES = ("gp_model_vu.json", "gp_model_delta.json")

__all__ = ["ApproxController", "approx_policy", "feedforward", "policy_error_report", "MODEL_FILES"]


@dataclass(frozen=True, eq=False)
class ApproxController:
    gp_vu: GpModel
    gp_delta: GpModel
    lower: tuple
    upper: tuple
    vehicle: VehicleParams
    r_v: float

    def __post_init__(self):
        if self.gp_vu.n_features != 4 or self.gp_delta.n_features != 4:
            raise ValueError("both GP models must take the 4 features (n, alpha, v, kappa)")

    @classmethod
    def from_params(cls, gp_vu: GpModel, gp_delta: GpModel, params: OcpParams) -> "ApproxController":
        return cls(gp_vu, gp_delta, (params.v_min, params.delta_min), (params.v_max, params.delta_max),
                   params.vehicle, params.r_v)

    @classmethod
    def load(cls, model_dir, params: OcpParams) -> "ApproxController":
        d = Path(model_dir)
        return cls.from_params(GpModel.load(d / MODEL_FILES[0]), GpModel.load(d / MODEL_FILES[1]), params)

    def save(self, model_dir) -> None:
        d = Path(model_dir)
        d.mkdir(parents=True, exist_ok=True)
        self.gp_vu.save(d / MODEL_FILES[0])
        self.gp_delta.save(d / MODEL_FILES[1])

    @property
    def n_data(self) -> int:
        return self.gp_vu.n_data

    def __call__(self, x, kappa: float) -> ControlInput:
        return approx_policy(x, kappa, self)

    def predict_batch(self, features) -> np.ndarray:
        """Clamped inputs for rows ``(n, alpha, v, kappa)``, shape ``(m, 2)``."""
        F = np.atleast_2d(np.asarray(features, float))
        u = np.column_stack([
            self.r_v + self.gp_vu.predict(F),
            np.arctan(self.vehicle.L * F[:, 3]) + self.gp_delta.predict(F),
        ])
        return np.clip(u, self.lower, self.upper)


def approx_policy(state, kappa: float, controller: ApproxController) -> ControlInput:
    """Input for curvilinear ``state`` given the local curvature only."""
    xi = np.array([state[1], state[2], state[3], kappa])
    v_u = controller.r_v + posterior_mean_fast(controller.gp_vu, xi)
    delta = math.atan(controller.vehicle.L * kappa) + posterior_mean_fast(controller.gp_delta, xi)
    lo, hi = controller.lower, controller.upper
    return ControlInput(min(max(v_u, lo[0]), hi[0]), min(max(delta, lo[1]), hi[1]))


def policy_error_report(controller: ApproxController, features, labels, out_csv=None) -> dict:
    """RMSE and max abs error of the approximate law against MPC inputs.

    ``labels`` are MPC residuals, so the MPC input is feedforward + label.
    """
    F = np.asarray(features, float).reshape(-1, 4)
    Y = np.asarray(labels, float).reshape(-1, 2)
    report = {"n_test": int(F.shape[0])}
    if F.shape[0]:
        mpc = np.column_stack([controller.r_v + Y[:, 0], np.arctan(controller.vehicle.L * F[:, 3]) + Y[:, 1]])
        err = controller.predict_batch(F) - mpc
        for j, name in enumerate(("vu", "delta")):
            report[f"rmse_{name}"] = float(np.sqrt(np.mean(err[:, j] ** 2)))
            report[f"max_{name}"] = float(np.max(np.abs(err[:, j])))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["output", "rmse", "max_abs_error", "n_test"])
            if F.shape[0]:
                for name in ("vu", "delta"):
                    w.writerow([name, repr(report[f"rmse_{name}"]), repr(report[f"max_{name}"]), report["n_test"]])
    return report
