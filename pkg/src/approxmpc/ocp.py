"""Tracking OCP in curvilinear coordinates and its Gauss-Newton SQP solver.

The horizon is condensed: shooting nodes are kept on the forward simulation
of the current input sequence, so only the ``2N`` inputs enter the QP and the
box constraints on the inputs are the only constraints.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .qp import solve_box_qp
from .track import CurvatureProfile, curvature_at
from .vehicle import EPS_SING, ControlInput, VehicleParams, feedforward

log = logging.getLogger(__name__)

DELTA_MAX = 12.0 * math.pi / 180.0


class InfeasibleLinearizationError(RuntimeError):
    """The rollout around which the OCP is linearized hits the model singularity."""


class NumericalFailureError(RuntimeError):
    pass


class _RolloutSingular(Exception):
    pass


@dataclass(frozen=True)
class OcpParams:
    w: tuple = (100.0, 5.0, 5.0)
    W_u: np.ndarray = field(default_factory=lambda: np.diag([5.0, 2.0]))
    N: int = 40
    v_min: float = 0.0
    v_max: float = 1.2
    delta_min: float = -DELTA_MAX
    delta_max: float = DELTA_MAX
    r_v: float = 0.5
    vehicle: VehicleParams = field(default_factory=VehicleParams)

    def __post_init__(self):
        W = np.array(self.W_u, dtype=float)
        W.setflags(write=False)
        object.__setattr__(self, "W_u", W)
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))
        if len(self.w) != 3 or min(self.w) <= 0:
            raise ValueError("stage weights must be three positive numbers")
        if W.shape != (2, 2) or not np.allclose(W, W.T):
            raise ValueError("W_u must be a symmetric 2x2 matrix")
        if np.min(np.linalg.eigvalsh(W)) <= 0:
            raise ValueError("W_u must be positive definite")
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if not (self.v_min < self.v_max and self.delta_min < self.delta_max):
            raise ValueError("input bounds must satisfy min < max")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.v_min, self.delta_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.v_max, self.delta_max])

    def clamp(self, u) -> ControlInput:
        return ControlInput(min(max(u[0], self.v_min), self.v_max), min(max(u[1], self.delta_min), self.delta_max))

    def u_ref(self, kappas) -> np.ndarray:
        """Feedforward input for each stage curvature, shape ``(len(kappas), 2)``."""
        kappas = np.atleast_1d(np.asarray(kappas, dtype=float))
        return np.column_stack([np.full(kappas.size, self.r_v), np.arctan(self.vehicle.L * kappas)])


@dataclass
class OcpSolution:
    inputs: np.ndarray
    states: np.ndarray
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool
    kappas: np.ndarray = field(repr=False, default=None)
    history: list = field(repr=False, default_factory=list)
    active_lower: np.ndarray = field(repr=False, default=None)
    active_upper: np.ndarray = field(repr=False, default=None)

    @property
    def first_input(self) -> ControlInput:
        return ControlInput(float(self.inputs[0, 0]), float(self.inputs[0, 1]))

    def history_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "kkt_residual", "step_norm"])
            for row in self.history:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _state_cost(n, alpha, v, params: OcpParams):
    w1, w2, w3 = params.w
    return w1 * (n * v) ** 2 + w2 * alpha**2 + w3 * (v - params.r_v) ** 2


def stage_cost(x, u, u_ref, params: OcpParams) -> float:
    du = np.asarray(u, float) - np.asarray(u_ref, float)
    return float(_state_cost(x[1], x[2], x[3], params) + du @ params.W_u @ du)


def terminal_cost(x_N, params: OcpParams) -> float:
    return float(_state_cost(x_N[1], x_N[2], x_N[3], params))


def rollout(x0, U, kappas, params: OcpParams) -> np.ndarray:
    """Forward RK4 simulation with curvature frozen per stage."""
    try:
        return _rollout(x0, U, kappas, params.vehicle)
    except _RolloutSingular as exc:
        raise InfeasibleLinearizationError(str(exc)) from None


def _rollout(x0, U, kappas, vp: VehicleParams) -> np.ndarray:
    L, T, h = vp.L, vp.T, vp.Ts
    cos, sin = math.cos, math.sin
    N = len(U)
    X = np.empty((N + 1, 4))
    s, n, a, v = (float(c) for c in x0)
    X[0] = (s, n, a, v)
    for i in range(N):
        vu = float(U[i][0])
        td = math.tan(U[i][1]) / L
        k = float(kappas[i])
        # four stage evaluations of the curvilinear right-hand side
        den = 1.0 - n * k
        if den <= EPS_SING:
            raise _RolloutSingular(f"1 - n*kappa = {den:.3e} at stage {i}")
        sd1 = v * cos(a) / den
        nd1 = v * sin(a)
        ad1 = v * td - k * sd1
        vd1 = (vu - v) / T
        n2, a2, v2 = n + 0.5 * h * nd1, a + 0.5 * h * ad1, v + 0.5 * h * vd1
        den = 1.0 - n2 * k
        if den <= EPS_SING:
            raise _RolloutSingular(f"1 - n*kappa = {den:.3e} at stage {i}")
        sd2 = v2 * cos(a2) / den
        nd2 = v2 * sin(a2)
        ad2 = v2 * td - k * sd2
        vd2 = (vu - v2) / T
        n3, a3, v3 = n + 0.5 * h * nd2, a + 0.5 * h * ad2, v + 0.5 * h * vd2
        den = 1.0 - n3 * k
        if den <= EPS_SING:
            raise _RolloutSingular(f"1 - n*kappa = {den:.3e} at stage {i}")
        sd3 = v3 * cos(a3) / den
        nd3 = v3 * sin(a3)
        ad3 = v3 * td - k * sd3
        vd3 = (vu - v3) / T
        n4, a4, v4 = n + h * nd3, a + h * ad3, v + h * vd3
        den = 1.0 - n4 * k
        if den <= EPS_SING:
            raise _RolloutSingular(f"1 - n*kappa = {den:.3e} at stage {i}")
        sd4 = v4 * cos(a4) / den
        nd4 = v4 * sin(a4)
        ad4 = v4 * td - k * sd4
        vd4 = (vu - v4) / T
        c = h / 6.0
        s += c * (sd1 + 2.0 * sd2 + 2.0 * sd3 + sd4)
        n += c * (nd1 + 2.0 * nd2 + 2.0 * nd3 + nd4)
        a += c * (ad1 + 2.0 * ad2 + 2.0 * ad3 + ad4)
        v += c * (vd1 + 2.0 * vd2 + 2.0 * vd3 + vd4)
        X[i + 1] = (s, n, a, v)
    return X


def objective(X, U, kappas, params: OcpParams) -> float:
    """Sum of stage costs over the horizon plus the terminal cost."""
    dU = U - params.u_ref(kappas)
    xc = _state_cost(X[:, 1], X[:, 2], X[:, 3], params)
    return float(np.sum(xc) + np.einsum("ij,jk,ik->", dU, params.W_u, dU))


def _rhs_and_jac(X, U, K, vp: VehicleParams):
    """Batched right-hand side and Jacobians; X (M,4), U (M,2), K (M,)."""
    n, a, v = X[:, 1], X[:, 2], X[:, 3]
    ca, sa = np.cos(a), np.sin(a)
    den = 1.0 - n * K
    td = np.tan(U[:, 1])
    sd = v * ca / den
    F = np.column_stack([sd, v * sa, v * td / vp.L - K * sd, (U[:, 0] - v) / vp.T])
    M = X.shape[0]
    Jx = np.zeros((M, 4, 4))
    dsd_dn = v * ca * K / den**2
    dsd_da = -v * sa / den
    dsd_dv = ca / den
    Jx[:, 0, 1], Jx[:, 0, 2], Jx[:, 0, 3] = dsd_dn, dsd_da, dsd_dv
    Jx[:, 1, 2], Jx[:, 1, 3] = v * ca, sa
    Jx[:, 2, 1], Jx[:, 2, 2], Jx[:, 2, 3] = -K * dsd_dn, -K * dsd_da, td / vp.L - K * dsd_dv
    Jx[:, 3, 3] = -1.0 / vp.T
    Ju = np.zeros((M, 4, 2))
    Ju[:, 2, 1] = v / (vp.L * np.cos(U[:, 1]) ** 2)
    Ju[:, 3, 0] = 1.0 / vp.T
    return F, Jx, Ju


def linearize(X, U, kappas, params: OcpParams):
    """Exact Jacobians ``A_i = dx_{i+1}/dx_i`` and ``B_i = dx_{i+1}/du_i`` of the RK4 step."""
    vp = params.vehicle
    h = vp.Ts
    Xs = X[:-1]
    K = np.asarray(kappas, float)
    I = np.eye(4)
    k1, J1x, J1u = _rhs_and_jac(Xs, U, K, vp)
    k2, J2x, J2u = _rhs_and_jac(Xs + 0.5 * h * k1, U, K, vp)
    k3, J3x, J3u = _rhs_and_jac(Xs + 0.5 * h * k2, U, K, vp)
    _, J4x, J4u = _rhs_and_jac(Xs + h * k3, U, K, vp)
    d1x, d1u = J1x, J1u
    d2x = J2x @ (I + 0.5 * h * d1x)
    d2u = J2x @ (0.5 * h * d1u) + J2u
    d3x = J3x @ (I + 0.5 * h * d2x)
    d3u = J3x @ (0.5 * h * d2u) + J3u
    d4x = J4x @ (I + h * d3x)
    d4u = J4x @ (h * d3u) + J4u
    A = I + h / 6.0 * (d1x + 2.0 * d2x + 2.0 * d3x + d4x)
    B = h / 6.0 * (d1u + 2.0 * d2u + 2.0 * d3u + d4u)
    return A, B


def condensed_qp(X, U, kappas, params: OcpParams):
    """Gauss-Newton Hessian and exact gradient of the objective w.r.t. the stacked inputs."""
    N = params.N
    A, B = linearize(X, U, kappas, params)
    nz = 2 * N
    S = np.zeros((N + 1, 4, nz))
    for i in range(N):
        S[i + 1, :, : 2 * i] = A[i] @ S[i, :, : 2 * i]
        S[i + 1, :, 2 * i : 2 * i + 2] = B[i]
    sw1, sw2, sw3 = np.sqrt(params.w)
    n, v = X[1:, 1], X[1:, 3]
    R = np.column_stack([sw1 * n * v, sw2 * X[1:, 2], sw3 * (v - params.r_v)])
    Rx = np.zeros((N, 3, 4))
    Rx[:, 0, 1], Rx[:, 0, 3] = sw1 * v, sw1 * n
    Rx[:, 1, 2] = sw2
    Rx[:, 2, 3] = sw3
    G = np.einsum("kij,kjm->kim", Rx, S[1:]).reshape(3 * N, nz)
    W = params.W_u
    H = 2.0 * (G.T @ G)
    idx = np.arange(N)
    for a_ in range(2):
        for b_ in range(2):
            H[2 * idx + a_, 2 * idx + b_] += 2.0 * W[a_, b_]
    g = 2.0 * (G.T @ R.ravel()) + 2.0 * ((U - params.u_ref(kappas)) @ W).ravel()
    return H, g


def projected_gradient_norm(U, g, params: OcpParams) -> float:
    z = U.ravel()
    lb = np.tile(params.lower, params.N)
    ub = np.tile(params.upper, params.N)
    return float(np.max(np.abs(z - np.clip(z - g, lb, ub))))


@dataclass
class SqpIterate:
    U: np.ndarray
    X: np.ndarray
    objective: float
    at_lower: np.ndarray = None
    at_upper: np.ndarray = None


class OcpSolver:
    """Gauss-Newton SQP for the tracking OCP.

    Instances hold mutable workspace (the last active set) and should not be
    shared between threads.
    """

    tol_kkt = 1e-6
    max_iter = 50
    max_halvings = 8

    def __init__(self, params: OcpParams):
        self.params = params
        self._lb = np.tile(params.lower, params.N)
        self._ub = np.tile(params.upper, params.N)

    def _iterate(self, x0, U, kappas) -> SqpIterate:
        X = rollout(x0, U, kappas, self.params)
        return SqpIterate(U, X, objective(X, U, kappas, self.params))

    def sqp_iterate(self, x0, kappas, it: SqpIterate, H=None, g=None):
        """One Gauss-Newton step with backtracking on cost increase.

        Returns ``(new_iterate, accepted, step_norm)``.
        """
        p = self.params
        if H is None:
            H, g = condensed_qp(it.X, it.U, kappas, p)
        z = it.U.ravel()
        qp = solve_box_qp(H, g - H @ z, self._lb, self._ub, x0=z, at_lower=it.at_lower, at_upper=it.at_upper)
        dz = qp.x - z
        if not np.all(np.isfinite(dz)):
            raise NumericalFailureError("non-finite QP step")
        t = 1.0
        for _ in range(self.max_halvings + 1):
            z_new = qp.x if t == 1.0 else np.clip(z + t * dz, self._lb, self._ub)
            U_new = z_new.reshape(p.N, 2)
            try:
                X_new = _rollout(x0, U_new, kappas, p.vehicle)
            except _RolloutSingular:
                t *= 0.5
                continue
            f_new = objective(X_new, U_new, kappas, p)
            if f_new <= it.objective:
                return SqpIterate(U_new, X_new, f_new, qp.at_lower, qp.at_upper), True, t * float(np.max(np.abs(dz)))
            t *= 0.5
        return it, False, 0.0

    def initial_guess(self, kappas) -> np.ndarray:
        return self.params.u_ref(kappas)

    def solve(self, x0, kappas, warm_start=None, max_iter=None) -> OcpSolution:
        p = self.params
        kappas = np.asarray(kappas, dtype=float)
        if kappas.shape != (p.N,):
            raise ValueError(f"expected {p.N} stage curvatures, got shape {kappas.shape}")
        max_iter = self.max_iter if max_iter is None else max_iter
        x0 = np.asarray(x0, dtype=float)
        if warm_start is not None:
            U0 = np.clip(np.asarray(warm_start.inputs if isinstance(warm_start, OcpSolution) else warm_start, float),
                         p.lower, p.upper)
        else:
            U0 = np.clip(self.initial_guess(kappas), p.lower, p.upper)
        it = self._iterate(x0, U0, kappas)
        history = []
        converged = False
        kkt = math.inf
        n_iter = 0
        while True:
            H, g = condensed_qp(it.X, it.U, kappas, p)
            kkt = projected_gradient_norm(it.U, g, p)
            if not math.isfinite(kkt) or not math.isfinite(it.objective):
                raise NumericalFailureError("non-finite SQP iterate")
            if kkt <= self.tol_kkt:
                converged = True
                history.append((n_iter, it.objective, kkt, 0.0))
                break
            if n_iter >= max_iter:
                history.append((n_iter, it.objective, kkt, 0.0))
                break
            new, accepted, step = self.sqp_iterate(x0, kappas, it, H, g)
            history.append((n_iter, it.objective, kkt, step))
            if not accepted:
                break
            it = new
            n_iter += 1
        if not converged:
            log.debug("SQP stopped after %d iterations, kkt=%.3e", n_iter, kkt)
        return OcpSolution(
            inputs=it.U, states=it.X, objective=it.objective, iterations=n_iter,
            kkt_residual=kkt, converged=converged, kappas=kappas, history=history,
            active_lower=it.at_lower, active_upper=it.at_upper,
        )

    def rti_step(self, x0, kappas, previous: OcpSolution | None):
        """Single SQP iteration from the shifted previous solution."""
        if previous is None:
            sol = self.solve(x0, kappas)
            return sol.first_input, sol
        p = self.params
        kappas = np.asarray(kappas, dtype=float)
        U = np.vstack([previous.inputs[1:], previous.inputs[-1:]])
        lo = hi = None
        if previous.active_lower is not None:
            lo = np.concatenate([previous.active_lower[2:], previous.active_lower[-2:]])
            hi = np.concatenate([previous.active_upper[2:], previous.active_upper[-2:]])
        it = self._iterate(np.asarray(x0, float), U, kappas)
        it.at_lower, it.at_upper = lo, hi
        H, g = condensed_qp(it.X, it.U, kappas, p)
        kkt = projected_gradient_norm(it.U, g, p)
        new, accepted, step = self.sqp_iterate(x0, kappas, it, H, g)
        sol = OcpSolution(
            inputs=new.U, states=new.X, objective=new.objective, iterations=1 if accepted else 0,
            kkt_residual=kkt, converged=kkt <= self.tol_kkt, kappas=kappas,
            history=[(0, it.objective, kkt, step)],
            active_lower=new.at_lower, active_upper=new.at_upper,
        )
        return sol.first_input, sol


def solve_ocp(x0, kappa_seq, params: OcpParams, warm_start=None) -> OcpSolution:
    return OcpSolver(params).solve(x0, kappa_seq, warm_start)


def horizon_curvature(profile: CurvatureProfile, s_now: float, params: OcpParams) -> np.ndarray:
    """Stage curvatures under constant-speed arc-length prediction."""
    s = s_now + np.arange(params.N) * params.vehicle.Ts * params.r_v
    return np.asarray(curvature_at(profile, s), dtype=float)


class MpcController:
    """Receding-horizon MPC carrying its warm start between calls."""

    def __init__(self, params: OcpParams, mode: str = "full"):
        if mode not in ("full", "rti"):
            raise ValueError(f"unknown MPC mode {mode!r}")
        self.params = params
        self.mode = mode
        self.solver = OcpSolver(params)
        self.previous: OcpSolution | None = None

    def reset(self) -> None:
        self.previous = None

    def __call__(self, x, profile: CurvatureProfile, s_now: float | None = None) -> ControlInput:
        s_now = x[0] if s_now is None else s_now
        kappas = horizon_curvature(profile, s_now, self.params)
        return self.control(x, kappas)

    def control(self, x, kappas) -> ControlInput:
        if self.mode == "rti":
            _, sol = self.solver.rti_step(x, kappas, self.previous)
        else:
            warm = None
            if self.previous is not None:
                warm = np.vstack([self.previous.inputs[1:], self.previous.inputs[-1:]])
            sol = self.solver.solve(x, kappas, warm_start=warm)
            if not sol.converged:
                log.warning("MPC solve not converged (kkt=%.2e); applying best iterate", sol.kkt_residual)
        self.previous = sol
        return self.params.clamp(sol.first_input)


def mpc_policy(x, profile: CurvatureProfile, s_now: float, params: OcpParams, mode: str = "full") -> ControlInput:
    """Stateless MPC law: first optimal input for state ``x`` on ``profile``."""
    return MpcController(params, mode)(x, profile, s_now)


def with_horizon(params: OcpParams, N: int) -> OcpParams:
    return replace(params, N=N)
