"""Closed-loop simulation, closed-loop cost, timing benchmarks and comparison reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import ApproxController, approx_policy
from .ocp import InfeasibleLinearizationError, MpcController, NumericalFailureError, OcpParams, stage_cost
from .track import CurvatureProfile, ProjectionError, centerline_from_curvature, curvature_at, wrap_s
from .vehicle import SingularityError, cartesian_dynamics, curvilinear_dynamics, discretize

log = logging.getLogger(__name__)

CONTROLLER_KINDS = ("mpc-full", "mpc-rti", "gp")
LOG_COLUMNS = ("t", "s", "s_total", "n", "alpha", "v", "p_x", "p_y", "psi", "kappa", "v_u", "delta")


@dataclass(frozen=True)
class SimConfig:
    track: CurvatureProfile
    controller: str = "mpc-full"
    duration: float = 50.0
    period: float = 0.01
    substeps: int = 10
    seed: int = 0
    n0: float = 0.0
    alpha0: float = 0.0
    v0: float | None = None  # None -> reference speed
    init_noise: float = 0.0  # std of a seeded perturbation of (n0, alpha0)
    input_noise: tuple = (0.0, 0.0)  # std of the actuator disturbance added to (v_u, delta)
    plant: str = "cartesian"

    def __post_init__(self):
        if self.controller not in CONTROLLER_KINDS:
            raise ValueError(f"controller must be one of {CONTROLLER_KINDS}")
        if not (self.duration > 0 and self.period > 0):
            raise ValueError("duration and period must be positive")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("substeps must be an integer >= 1")
        object.__setattr__(self, "input_noise", tuple(float(x) for x in self.input_noise))
        if len(self.input_noise) != 2 or min(self.input_noise) < 0:
            raise ValueError("input_noise must be two non-negative standard deviations")
        if self.plant not in ("cartesian", "curvilinear"):
            raise ValueError("plant must be 'cartesian' or 'curvilinear'")

    @property
    def n_steps(self) -> int:
        # tolerate durations that are an exact multiple up to rounding
        return int(math.floor(self.duration / self.period + 1e-9))


@dataclass
class SimResult:
    """Per-step log. Row ``k`` holds the state at ``t_k`` and the input commanded on ``[t_k, t_k+1)``;
    the last row has no input (NaN). Compute times live apart from the log so logs stay reproducible."""

    config: SimConfig
    t: np.ndarray
    curvilinear: np.ndarray  # (K+1, 4): s (wrapped on closed tracks), n, alpha, v
    cartesian: np.ndarray  # (K+1, 4): p_x, p_y, psi, v
    inputs: np.ndarray  # (K+1, 2)
    kappa: np.ndarray
    s_total: np.ndarray  # unwrapped arc length travelled since start
    compute_time: np.ndarray  # (K,) seconds per controller call
    J_cl: float
    lap_count: int
    status: str = "ok"

    @property
    def n_calls(self) -> int:
        return int(np.sum(np.isfinite(self.inputs[:, 0])))

    def rows(self):
        for k in range(self.t.size):
            yield (self.t[k], self.curvilinear[k, 0], self.s_total[k], *self.curvilinear[k, 1:],
                   *self.cartesian[k, :3], self.kappa[k], *self.inputs[k])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for row in self.rows():
                w.writerow([repr(float(v)) for v in row])

    def timing_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "compute_time_s"])
            for k, dt in enumerate(self.compute_time):
                w.writerow([k, repr(float(dt))])

    def max_abs_n(self, after_lap: int = 0) -> float:
        """Max lateral deviation once ``after_lap`` laps are completed (NaN if never reached)."""
        mask = self.s_total >= after_lap * self.config.track.total_length
        return float(np.max(np.abs(self.curvilinear[mask, 1]))) if mask.any() else float("nan")


def read_log_csv(path) -> dict:
    with open(path, newline="") as fh:
        recs = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in recs]) for c in LOG_COLUMNS}


def closed_loop_cost(log_or_result, params: OcpParams, profile: CurvatureProfile | None = None) -> float:
    """Mean stage cost over the rows that carry an input.

    Accepts a ``SimResult`` or a mapping/array with columns ``s, n, alpha, v, v_u, delta``;
    the input reference is the feedforward of the local curvature.
    """
    if isinstance(log_or_result, SimResult):
        X, U = log_or_result.curvilinear, log_or_result.inputs
        profile = log_or_result.config.track if profile is None else profile
    elif isinstance(log_or_result, dict):
        X = np.column_stack([log_or_result[c] for c in ("s", "n", "alpha", "v")])
        U = np.column_stack([log_or_result["v_u"], log_or_result["delta"]])
    else:
        arr = np.atleast_2d(np.asarray(log_or_result, float))
        X, U = arr[:, :4], arr[:, 4:6]
    rows = np.isfinite(U).all(axis=1)
    if not rows.any():
        return float("nan")
    X, U = X[rows], U[rows]
    u_ref = params.u_ref(curvature_at(profile, X[:, 0]))
    costs = [stage_cost(x, u, ur, params) for x, u, ur in zip(X, U, u_ref)]
    return float(np.mean(costs))


def _make_policy(config: SimConfig, params: OcpParams, gp: ApproxController | None):
    profile = config.track
    if config.controller == "gp":
        if gp is None:
            raise ValueError("controller 'gp' needs trained models")
        return lambda x: approx_policy(x, float(curvature_at(profile, x[0])), gp)
    mpc = MpcController(params, "full" if config.controller == "mpc-full" else "rti")
    return lambda x: mpc(x, profile)


def initial_state(config: SimConfig, params: OcpParams) -> np.ndarray:
    n0, a0 = config.n0, config.alpha0
    if config.init_noise > 0:
        dn, da = np.random.default_rng(config.seed).normal(0.0, config.init_noise, 2)
        n0, a0 = n0 + dn, a0 + da
    return np.array([0.0, n0, a0, params.r_v if config.v0 is None else config.v0])


def simulate(config: SimConfig, params: OcpParams, gp: ApproxController | None = None) -> SimResult:
    """Run the closed loop; on projection or model failure return the partial log with an error status."""
    profile = config.track
    vp = params.vehicle
    K = config.n_steps
    h = config.period / config.substeps
    policy = _make_policy(config, params, gp)
    cartesian_plant = config.plant == "cartesian"
    line = centerline_from_curvature(profile)
    f_cart = lambda x_, u_: cartesian_dynamics(x_, u_, vp)  # noqa: E731
    f_curv = lambda x_, u_: curvilinear_dynamics(x_, u_, profile, vp)  # noqa: E731

    curv = np.full((K + 1, 4), np.nan)
    cart = np.full((K + 1, 4), np.nan)
    inputs = np.full((K + 1, 2), np.nan)
    s_total = np.full(K + 1, np.nan)
    times = np.full(K, np.nan)

    xc = initial_state(config, params)
    noise_rng = np.random.default_rng([config.seed, 1])
    noisy = any(config.input_noise)
    xp = np.array(line.to_cartesian(xc))
    travelled, s_prev = 0.0, xc[0]
    status = "ok"
    for k in range(K + 1):
        try:
            if cartesian_plant:
                xc = np.array(line.project(xp, s_hint=s_prev))
            else:
                if profile.closed:
                    xc[0] = wrap_s(profile, xc[0])
                xp = np.array(line.to_cartesian(xc))
            cart[k] = xp
            ds = xc[0] - s_prev
            if profile.closed:
                ds = (ds + 0.5 * profile.total_length) % profile.total_length - 0.5 * profile.total_length
            travelled += ds
            s_prev = xc[0]
            curv[k] = xc
            s_total[k] = travelled
            if k == K:
                break
            t0 = time.perf_counter_ns()
            u = policy(xc)
            times[k] = (time.perf_counter_ns() - t0) * 1e-9
            inputs[k] = u
            if noisy:
                # the plant sees the command plus a disturbance held over the period
                u = np.asarray(u) + noise_rng.normal(0.0, config.input_noise)
            for _ in range(config.substeps):
                if cartesian_plant:
                    xp = discretize(f_cart, xp, u, h)
                else:
                    xc = discretize(f_curv, xc, u, h)
        except (ProjectionError, SingularityError, InfeasibleLinearizationError, NumericalFailureError) as exc:
            status = f"error: {exc}"
            log.error("simulation aborted at step %d: %s", k, exc)
            break

    n_rows = int(np.sum(np.isfinite(curv[:, 0])))
    inputs[max(n_rows - 1, 0)] = np.nan
    t = np.arange(K + 1) * config.period
    result = SimResult(
        config, t[:n_rows], curv[:n_rows], cart[:n_rows], inputs[:n_rows],
        np.asarray(curvature_at(profile, curv[:n_rows, 0]), float).reshape(-1),
        s_total[:n_rows], times[: max(n_rows - 1, 0)], 0.0,
        int(travelled // profile.total_length) if profile.closed else 0, status,
    )
    result.J_cl = closed_loop_cost(result, params)
    return result


@dataclass
class TimingStats:
    median: float
    mean: float
    p25: float
    p75: float
    min: float
    max: float
    n: int
    samples: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_samples(cls, samples) -> "TimingStats":
        x = np.asarray(samples, float)
        return cls(float(np.median(x)), float(np.mean(x)), float(np.percentile(x, 25)),
                   float(np.percentile(x, 75)), float(np.min(x)), float(np.max(x)), int(x.size), x)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("median", "mean", "p25", "p75", "min", "max", "n")}


def benchmark_timing(controllers: dict, queries, n_evaluations: int = 2000, warmup: int = 100) -> dict:
    """Time each callable in ``controllers`` on the same query sequence.

    Queries are replayed in order (cycling if needed) so warm-started
    controllers see consecutive closed-loop states.
    """
    if n_evaluations < 1000:
        raise ValueError("n_evaluations must be >= 1000")
    queries = list(queries)
    if not queries:
        raise ValueError("no queries")
    out = {}
    for name, fn in controllers.items():
        for i in range(warmup):
            fn(queries[i % len(queries)])
        samples = np.empty(n_evaluations)
        clock = time.perf_counter_ns
        for i in range(n_evaluations):
            q = queries[i % len(queries)]
            t0 = clock()
            fn(q)
            samples[i] = (clock() - t0) * 1e-9
        out[name] = TimingStats.from_samples(samples)
    return out


def timing_controllers(params: OcpParams, profile: CurvatureProfile, gp_models: dict) -> dict:
    """Callables ``query -> input`` for MPC-RTI and each GP controller; a query is a curvilinear state."""
    mpc = MpcController(params, "rti")
    ctrls = {"mpc-rti": lambda x: mpc(x, profile)}
    for name, gp in gp_models.items():
        ctrls[name] = lambda x, gp=gp: approx_policy(x, float(curvature_at(profile, x[0])), gp)
    return ctrls


def timing_to_json(stats: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump({k: v.to_dict() for k, v in stats.items()}, fh, indent=2, sort_keys=True)


def compare_report(mpc: SimResult, gp: SimResult, out_dir, timing: dict | None = None) -> dict:
    """Write driven paths, state traces and a summary of both runs to ``out_dir``."""
    if mpc.config.track != gp.config.track:
        raise ValueError("cannot compare runs on different tracks")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = (("mpc", mpc), ("gp", gp))
    with open(out / "paths.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "t", "p_x", "p_y"])
        for name, r in runs:
            for k in range(r.t.size):
                w.writerow([name, repr(float(r.t[k])), repr(float(r.cartesian[k, 0])), repr(float(r.cartesian[k, 1]))])
    with open(out / "states.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "s", "s_total", "n", "alpha"])
        for name, r in runs:
            for k in range(r.t.size):
                w.writerow([name] + [repr(float(v)) for v in
                                     (r.curvilinear[k, 0], r.s_total[k], r.curvilinear[k, 1], r.curvilinear[k, 2])])
    ratio = gp.J_cl / mpc.J_cl if mpc.J_cl > 0 else (1.0 if gp.J_cl == mpc.J_cl else float("inf"))
    summary = {
        "track_length": mpc.config.track.total_length,
        "duration": mpc.config.duration,
        "J_cl_mpc": mpc.J_cl,
        "J_cl_gp": gp.J_cl,
        "J_cl_ratio": ratio,
        "laps_mpc": mpc.lap_count,
        "laps_gp": gp.lap_count,
        "max_abs_n_after_first_lap_mpc": mpc.max_abs_n(1),
        "max_abs_n_after_first_lap_gp": gp.max_abs_n(1),
        "status_mpc": mpc.status,
        "status_gp": gp.status,
    }
    # undefined quantities (e.g. no completed lap) are written as null
    summary = {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in summary.items()}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    if timing is not None:
        timing_to_json(timing, out / "timing.json")
    return summary


def read_compare_report(out_dir) -> dict:
    out = Path(out_dir)
    res = {}
    for name in ("paths", "states"):
        with open(out / f"{name}.csv", newline="") as fh:
            res[name] = list(csv.DictReader(fh))
    with open(out / "summary.json") as fh:
        res["summary"] = json.load(fh)
    return res
