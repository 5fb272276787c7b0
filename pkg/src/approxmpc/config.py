"""YAML run configuration with sections vehicle, ocp, gp, pipeline, sim and track."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .data import FeatureDomain, HyperSchedule
from .ocp import OcpParams
from .sim import SimConfig
from .track import CurvatureProfile, builtin_profile
from .vehicle import VehicleParams

SECTIONS = ("vehicle", "ocp", "gp", "pipeline", "sim", "track")


@dataclass(frozen=True)
class GpConfig:
    n_active: int = 1000
    refit_every: int = 250
    restarts: int = 5
    maxfev: int = 500
    max_points: int = 500
    init_points: int = 200
    validate_refits: bool = True

    @property
    def schedule(self) -> HyperSchedule:
        return HyperSchedule(self.refit_every, self.restarts, self.maxfev, self.max_points, self.validate_refits)


@dataclass(frozen=True)
class PipelineConfig:
    n_rollouts: int = 400
    rollout_len: int = 50
    pool_size: int = 20000
    test_size: int = 3000
    budget: int = 2000
    n_max: float = 0.3
    alpha_max: float = 0.6
    n_jobs: int = 1


@dataclass(frozen=True)
class SimSection:
    duration: float = 50.0
    period: float = 0.01
    substeps: int = 10
    n0: float = 0.0
    alpha0: float = 0.0
    v0: float | None = None
    init_noise: float = 0.0
    # actuator disturbance std as a fraction of each input range; 0.16 puts the
    # MPC closed-loop cost on the benchmark track near the measured hardware level
    disturbance: float = 0.16
    timing_evaluations: int = 2000


@dataclass(frozen=True)
class Config:
    ocp: OcpParams = field(default_factory=OcpParams)
    gp: GpConfig = field(default_factory=GpConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    sim: SimSection = field(default_factory=SimSection)
    track: CurvatureProfile = field(default_factory=lambda: builtin_profile("benchmark"))

    def domain(self) -> FeatureDomain:
        return FeatureDomain.default(self.ocp, self.pipeline.n_max, self.pipeline.alpha_max)

    def sim_config(self, controller: str, seed: int = 0, track: CurvatureProfile | None = None) -> SimConfig:
        s, p = self.sim, self.ocp
        noise = (s.disturbance * (p.v_max - p.v_min), s.disturbance * (p.delta_max - p.delta_min))
        return SimConfig(self.track if track is None else track, controller, s.duration, s.period,
                         s.substeps, seed, s.n0, s.alpha0, s.v0, s.init_noise, noise)

    def to_dict(self) -> dict:
        p = self.ocp
        return {
            "vehicle": asdict(p.vehicle),
            "ocp": {
                "w": list(p.w), "W_u": np.asarray(p.W_u).tolist(), "N": p.N,
                "v_min": p.v_min, "v_max": p.v_max, "delta_min": p.delta_min, "delta_max": p.delta_max, "r_v": p.r_v,
            },
            "gp": asdict(self.gp),
            "pipeline": asdict(self.pipeline),
            "sim": asdict(self.sim),
            "track": self.track.to_dict(),
        }


def _section(cls, doc: dict, name: str):
    doc = doc or {}
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    return cls(**doc)


def _ocp_from(doc: dict, vehicle: VehicleParams) -> OcpParams:
    doc = dict(doc or {})
    for key in ("delta_min", "delta_max"):
        # angles may be given in degrees with a *_deg suffix
        if key + "_deg" in doc:
            doc[key] = math.radians(float(doc.pop(key + "_deg")))
    if "W_u" in doc:
        W = np.asarray(doc["W_u"], float)
        doc["W_u"] = np.diag(W) if W.ndim == 1 else W
    if "w" in doc:
        doc["w"] = tuple(doc["w"])
    return _section(OcpParams, {**doc, "vehicle": vehicle}, "ocp")


def _track_from(doc) -> CurvatureProfile:
    if doc is None:
        return builtin_profile("benchmark")
    if isinstance(doc, str):
        return builtin_profile(doc)
    return CurvatureProfile.from_dict(doc)


def config_from_dict(doc: dict | None) -> Config:
    doc = doc or {}
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    vehicle = _section(VehicleParams, doc.get("vehicle"), "vehicle")
    return Config(
        ocp=_ocp_from(doc.get("ocp"), vehicle),
        gp=_section(GpConfig, doc.get("gp"), "gp"),
        pipeline=_section(PipelineConfig, doc.get("pipeline"), "pipeline"),
        sim=_section(SimSection, doc.get("sim"), "sim"),
        track=_track_from(doc.get("track")),
    )


def load_config(path=None) -> Config:
    """Defaults when ``path`` is None; missing keys fall back to defaults."""
    if path is None:
        return Config()
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def save_config(config: Config, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)

