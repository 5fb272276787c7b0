"""Training data: reachable-set sampling, residual labels and greedy selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .gp import GpHyperparams, Standardizer, _augment, fit_alpha, kernel_matrix, optimize_hyperparams
from .ocp import MpcController, OcpParams, OcpSolver, InfeasibleLinearizationError, NumericalFailureError
from .track import CurvatureProfile, curvature_at
from .vehicle import SingularityError, curvilinear_dynamics, discretize

log = logging.getLogger(__name__)

FEATURE_NAMES = ("n", "alpha", "v", "kappa")
DATASET_COLUMNS = ("n", "alpha", "v", "kappa", "dvu", "ddelta", "source")


def kappa_max(params: OcpParams) -> float:
    """Largest curvature a saturated steady steering angle can hold."""
    return math.tan(params.delta_max) / params.vehicle.L


@dataclass(frozen=True)
class FeatureDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        if lo.shape != (4,) or hi.shape != (4,) or np.any(lo >= hi):
            raise ValueError("feature domain needs 4 bounds with lower < upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def default(cls, params: OcpParams, n_max=0.3, alpha_max=0.6) -> "FeatureDomain":
        k = kappa_max(params)
        return cls(np.array([-n_max, -alpha_max, params.v_min, -k]), np.array([n_max, alpha_max, params.v_max, k]))

    def contains(self, xi) -> np.ndarray:
        xi = np.asarray(xi, float)
        return np.all((xi >= self.lower) & (xi <= self.upper), axis=-1)

    def sample(self, rng, size=None) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=None if size is None else (size, 4))


def random_profile(rng, kappa0: float, k_max: float, length: float) -> CurvatureProfile:
    """Open piecewise-linear curvature profile starting at ``kappa0``."""
    s, k = [0.0], [kappa0]
    while s[-1] < length:
        s.append(s[-1] + rng.uniform(0.2, 1.0))
        k.append(rng.uniform(-k_max, k_max))
    return CurvatureProfile(np.array(s), np.array(k), closed=False)


def sample_reachable(
    params: OcpParams,
    domain: FeatureDomain,
    n_rollouts: int,
    rollout_len: int,
    seed: int,
    initial_features=None,
    profiles=None,
    mode: str = "full",
    stream: int = 0,
):
    """Approximate the closed-loop reachable set by MPC rollouts.

    Returns ``(features, rollout_ids)``. Visited features that leave the
    domain are dropped; rollouts that hit the model singularity stop early.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    vp = params.vehicle
    k_max = float(domain.upper[3])
    length = rollout_len * vp.Ts * params.v_max + params.N * vp.Ts * params.r_v + 0.5
    feats, ids = [], []
    for r in range(n_rollouts):
        rng = np.random.default_rng([seed, stream, r])
        xi0 = domain.sample(rng) if initial_features is None else np.asarray(initial_features[r], float)
        profile = random_profile(rng, xi0[3], k_max, length) if profiles is None else profiles[r]
        mpc = MpcController(params, mode)
        x = np.array([0.0, xi0[0], xi0[1], xi0[2]])
        f = lambda x_, u_: curvilinear_dynamics(x_, u_, profile, vp)  # noqa: E731
        for k in range(rollout_len + 1):
            xi = np.array([x[1], x[2], x[3], curvature_at(profile, x[0])])
            if domain.contains(xi):
                feats.append(xi)
                ids.append(r)
            if k == rollout_len:
                break
            try:
                u = mpc(x, profile)
                x = discretize(f, x, u, vp.Ts)
            except (SingularityError, InfeasibleLinearizationError, NumericalFailureError) as exc:
                log.info("rollout %d truncated at step %d: %s", r, k, exc)
                break
    return np.array(feats).reshape(-1, 4), np.array(ids, dtype=int)


def label_sample(xi, params: OcpParams, solver: OcpSolver | None = None):
    """Residual ``u*_0 - u_ff`` under a constant-curvature horizon, or ``None`` if unconverged."""
    solver = OcpSolver(params) if solver is None else solver
    n, alpha, v, kappa = (float(c) for c in xi)
    try:
        sol = solver.solve([0.0, n, alpha, v], np.full(params.N, kappa))
    except (InfeasibleLinearizationError, NumericalFailureError) as exc:
        log.info("label rejected for %s: %s", xi, exc)
        return None
    if not sol.converged:
        log.info("label rejected for %s: not converged (kkt=%.2e)", xi, sol.kkt_residual)
        return None
    return sol.inputs[0] - params.u_ref([kappa])[0]


def _label_chunk(features, params):
    solver = OcpSolver(params)
    out = np.full((len(features), 2), np.nan)
    for i, xi in enumerate(features):
        y = label_sample(xi, params, solver)
        if y is not None:
            out[i] = y
    return out


def label_pool(features, params: OcpParams, n_jobs: int = 1) -> np.ndarray:
    """Labels for every row; rejected samples are NaN. Results keep input order."""
    features = np.asarray(features, float).reshape(-1, 4)
    if n_jobs == 1 or len(features) < 64:
        return _label_chunk(features, params)
    from joblib import Parallel, delayed

    chunks = np.array_split(features, max(1, 4 * abs(n_jobs)))
    parts = Parallel(n_jobs=n_jobs)(delayed(_label_chunk)(c, params) for c in chunks)
    return np.vstack(parts)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    selection_trace: list = field(default_factory=list)
    pool_rollouts: np.ndarray | None = field(default=None, repr=False)
    test_rollouts: np.ndarray | None = field(default=None, repr=False)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DATASET_COLUMNS)
            for src, F, Y in (("pool", self.features, self.labels), ("test", self.test_features, self.test_labels)):
                for xi, y in zip(F, Y):
                    w.writerow([repr(float(c)) for c in xi] + [repr(float(c)) for c in y] + [src])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        rows = {"pool": ([], []), "test": ([], [])}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                F, Y = rows[rec["source"]]
                F.append([float(rec[c]) for c in FEATURE_NAMES])
                Y.append([float(rec["dvu"]), float(rec["ddelta"])])
        arr = lambda a, w: np.array(a, float).reshape(-1, w)  # noqa: E731
        return cls(arr(rows["pool"][0], 4), arr(rows["pool"][1], 2), arr(rows["test"][0], 4), arr(rows["test"][1], 2))


def _labeled_subset(features, ids, size, params, rng, n_jobs):
    if len(features) > size:
        keep = np.sort(rng.choice(len(features), size, replace=False))
        features, ids = features[keep], ids[keep]
    labels = label_pool(features, params, n_jobs)
    ok = np.all(np.isfinite(labels), axis=1)
    if not ok.all():
        log.warning("%d of %d samples rejected during labeling", int((~ok).sum()), len(ok))
    return features[ok], labels[ok], ids[ok]


def generate_dataset(params: OcpParams, domain: FeatureDomain, n_rollouts: int, rollout_len: int,
                     pool_size: int, test_size: int, seed: int, n_jobs: int = 1) -> Dataset:
    """Labeled candidate pool and held-out test set from independent rollouts.

    Candidates beyond ``pool_size`` / ``test_size`` are dropped by a seeded
    uniform subsample; rejected labels shrink the sets further.
    """
    rng = np.random.default_rng([seed, 4])
    F, ids = sample_reachable(params, domain, n_rollouts, rollout_len, seed, stream=0)
    F, Y, ids = _labeled_subset(F, ids, pool_size, params, rng, n_jobs)
    n_test_rollouts = max(1, math.ceil(1.2 * test_size / (rollout_len + 1)))
    Ft, ids_t = sample_reachable(params, domain, n_test_rollouts, rollout_len, seed, stream=1)
    Ft, Yt, ids_t = _labeled_subset(Ft, ids_t, test_size, params, rng, n_jobs)
    if len(F) < pool_size or len(Ft) < test_size:
        log.warning("dataset smaller than requested: pool %d/%d, test %d/%d", len(F), pool_size, len(Ft), test_size)
    return Dataset(F, Y, Ft, Yt, pool_rollouts=ids, test_rollouts=ids_t)


class IncrementalGp:
    """Exact GP over a growing subset of a fixed candidate pool.

    Keeps the Cholesky factor of the selected Gram matrix and the kernel rows
    between selected points and every pool / test point, so each addition
    costs O(n_selected * (n_pool + n_test)).
    """

    def __init__(self, pool_X, pool_y, test_X, test_y, hyper: GpHyperparams, scaler: Standardizer, capacity: int):
        self.scaler = scaler
        self.Zp = scaler(pool_X)
        self.Zt = scaler(test_X)
        self.yp = np.asarray(pool_y, float)
        self.yt = np.asarray(test_y, float)
        self.capacity = capacity
        self.selected: list[int] = []
        self.L = np.zeros((capacity, capacity))
        self.Kp = np.empty((capacity, self.Zp.shape[0]))
        self.Kt = np.empty((capacity, self.Zt.shape[0]))
        self.alpha = np.zeros(0)
        self.set_hyper(hyper)

    def _diag(self, Z):
        Zt = _augment(Z)
        q = np.einsum("ij,ij->i", Zt * self.hyper.lam, Zt)
        return self.hyper.s_f * np.arcsin(q / (1.0 + 2.0 * q))

    def set_hyper(self, hyper: GpHyperparams) -> None:
        """Switch hyperparameters and rebuild every cached quantity."""
        self.hyper = hyper
        self.kpp = self._diag(self.Zp)
        m = len(self.selected)
        if m:
            Zs = self.Zp[self.selected]
            self.Kp[:m] = kernel_matrix(Zs, self.Zp, hyper)
            self.Kt[:m] = kernel_matrix(Zs, self.Zt, hyper)
            K = self.Kp[:m, self.selected]
            K = 0.5 * (K + K.T) + hyper.sigma2 * np.eye(m)
            self.L[:m, :m] = np.linalg.cholesky(K)
        self._update_alpha()

    def _update_alpha(self) -> None:
        m = len(self.selected)
        if m == 0:
            self.alpha = np.zeros(0)
            self.pool_mean = np.zeros(self.Zp.shape[0])
            self.test_mean = np.zeros(self.Zt.shape[0])
            return
        self.alpha = cho_solve((self.L[:m, :m], True), self.yp[self.selected])
        self.pool_mean = self.alpha @ self.Kp[:m]
        self.test_mean = self.alpha @ self.Kt[:m]

    def add(self, idx: int) -> None:
        m = len(self.selected)
        if m >= self.capacity:
            raise ValueError("capacity exhausted")
        k_col = self.Kp[:m, idx]
        if m:
            l = solve_triangular(self.L[:m, :m], k_col, lower=True, check_finite=False)
            d2 = self.kpp[idx] + self.hyper.sigma2 - l @ l
        else:
            l = np.zeros(0)
            d2 = self.kpp[idx] + self.hyper.sigma2
        if d2 <= 1e-14 * (self.kpp[idx] + self.hyper.sigma2):
            log.warning("near-singular Gram update at pool index %d", idx)
            d2 = 1e-14 * (self.kpp[idx] + self.hyper.sigma2)
        self.L[m, :m] = l
        self.L[m, m] = math.sqrt(d2)
        z = self.Zp[idx : idx + 1]
        self.Kp[m] = kernel_matrix(z, self.Zp, self.hyper)[0]
        self.Kt[m] = kernel_matrix(z, self.Zt, self.hyper)[0]
        self.selected.append(int(idx))
        self._update_alpha()

    def pool_errors(self) -> np.ndarray:
        return np.abs(self.yp - self.pool_mean)

    def held_out_mse(self) -> float:
        """Mean squared error over the pool points not selected yet."""
        mask = np.ones(self.yp.size, bool)
        mask[self.selected] = False
        return float(np.mean((self.yp[mask] - self.pool_mean[mask]) ** 2)) if mask.any() else 0.0

    def test_rmse(self) -> float:
        return float(np.sqrt(np.mean((self.yt - self.test_mean) ** 2))) if self.yt.size else float("nan")


@dataclass
class SelectionResult:
    trace: list
    pre_errors: list
    rmse: list  # rmse[t] = test RMSE with the first t points; rmse[0] is the prior
    hypers: dict  # selection size at which hyperparameters were (re)set -> GpHyperparams
    scaler: Standardizer

    def hyper_for(self, n_points: int) -> GpHyperparams:
        """Hyperparameters in effect once ``n_points`` points were selected."""
        return self.hypers[max(k for k in self.hypers if k <= n_points)]


@dataclass(frozen=True)
class HyperSchedule:
    refit_every: int = 250
    restarts: int = 5
    maxfev: int = 500
    max_points: int = 500
    # keep a refit only if it lowers the squared error on the unselected pool
    validate: bool = True


def _run_selection(pool_X, pool_y, test_X, test_y, budget, hyper0, scaler, seed, schedule, chooser):
    gp = IncrementalGp(pool_X, pool_y, test_X, test_y, hyper0, scaler, budget)
    trace, pre_errors, rmse = [], [], [gp.test_rmse()]
    hypers = {0: hyper0}
    rng = np.random.default_rng([seed, 7])
    for t in range(budget):
        idx, err = chooser(gp, t)
        trace.append(idx)
        pre_errors.append(err)
        gp.add(idx)
        n = t + 1
        if schedule.refit_every and n % schedule.refit_every == 0 and n < len(pool_y):
            sel = np.array(gp.selected)
            if sel.size > schedule.max_points:
                sel = np.sort(rng.choice(sel, schedule.max_points, replace=False))
            previous = gp.hyper
            before = gp.held_out_mse()
            hyper = optimize_hyperparams(
                gp.Zp[sel], gp.yp[sel], previous, seed=seed + n,
                restarts=schedule.restarts, maxfev=schedule.maxfev,
            )
            gp.set_hyper(hyper)
            if schedule.validate and not gp.held_out_mse() < before:
                log.info("refit at %d points rejected by the held-out pool error", n)
                gp.set_hyper(previous)
            else:
                hypers[n] = hyper
        rmse.append(gp.test_rmse())
    return SelectionResult(trace, pre_errors, rmse, hypers, scaler)


def greedy_select(pool_X, pool_y, test_X, test_y, budget, hyper0, seed, scaler=None, schedule=HyperSchedule()):
    """Greedy error-maximizing selection for one output dimension.

    Starts at a uniformly drawn pool point, then repeatedly adds the pool point
    with the largest absolute prediction error (ties -> smallest index).
    """
    n_pool = len(pool_y)
    if not 1 <= budget <= n_pool:
        raise ValueError(f"budget must be in [1, {n_pool}]")
    scaler = Standardizer.fit(pool_X) if scaler is None else scaler
    start = int(np.random.default_rng([seed, 1]).integers(n_pool))

    def chooser(gp, t):
        err = gp.pool_errors()
        if t == 0:
            return start, float(err[start])
        err[gp.selected] = -np.inf
        i = int(np.argmax(err))
        return i, float(err[i])

    return _run_selection(pool_X, pool_y, test_X, test_y, budget, hyper0, scaler, seed, schedule, chooser)


def random_select(n_pool: int, budget: int, seed: int) -> list:
    if budget > n_pool:
        raise ValueError("budget exceeds pool size")
    return [int(i) for i in np.random.default_rng([seed, 2]).permutation(n_pool)[:budget]]


def random_selection_curve(pool_X, pool_y, test_X, test_y, budget, hyper0, seed, scaler=None, schedule=HyperSchedule()):
    """Test-RMSE curve for a uniformly random selection order."""
    scaler = Standardizer.fit(pool_X) if scaler is None else scaler
    order = random_select(len(pool_y), budget, seed)

    def chooser(gp, t):
        i = order[t]
        return i, float(gp.pool_errors()[i])

    return _run_selection(pool_X, pool_y, test_X, test_y, budget, hyper0, scaler, seed, schedule, chooser)


def initial_hyper(pool_X, pool_y, scaler: Standardizer, seed: int, n_points: int = 200,
                  schedule: HyperSchedule = HyperSchedule()) -> GpHyperparams:
    """Marginal-likelihood fit on a random pool subset, used before the first refit."""
    rng = np.random.default_rng([seed, 3])
    n = min(n_points, len(pool_y))
    idx = np.sort(rng.choice(len(pool_y), n, replace=False))
    start = GpHyperparams.default(pool_X.shape[1], s_f=float(np.var(pool_y)) + 1e-6, lam=1.0, sigma2=1e-4)
    return optimize_hyperparams(scaler(pool_X[idx]), pool_y[idx], start, seed=seed,
                                restarts=schedule.restarts, maxfev=schedule.maxfev)


def model_from_selection(pool_X, pool_y, result: SelectionResult, n_active: int, output_index: int):
    idx = result.trace[:n_active]
    return fit_alpha(pool_X[idx], pool_y[idx], result.hyper_for(len(idx)), output_index, scaler=result.scaler)


@dataclass
class TrainedOutput:
    greedy: SelectionResult
    random: SelectionResult
    model: object  # GpModel on the first n_active greedy points
    model_budget: object  # GpModel on the whole greedy trace


def train_output(dataset: Dataset, output_index: int, n_active: int, budget: int, seed: int,
                 schedule: HyperSchedule = HyperSchedule(), init_points: int = 200) -> TrainedOutput:
    """Greedy and random selection curves plus deployable models for one output."""
    F, y = dataset.features, dataset.labels[:, output_index]
    Ft, yt = dataset.test_features, dataset.test_labels[:, output_index]
    budget = min(budget, len(y))
    scaler = Standardizer.fit(F)
    h0 = initial_hyper(F, y, scaler, seed, init_points, schedule)
    greedy = greedy_select(F, y, Ft, yt, budget, h0, seed, scaler, schedule)
    rand = random_selection_curve(F, y, Ft, yt, budget, h0, seed, scaler, schedule)
    return TrainedOutput(
        greedy, rand,
        model_from_selection(F, y, greedy, min(n_active, budget), output_index),
        model_from_selection(F, y, greedy, budget, output_index),
    )


def write_trace_csv(path, result: SelectionResult, output_index: int) -> None:
    """Per-step selection log; the RMSE column of the other output stays empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "index", "pre_error", "rmse_vu", "rmse_delta"])
        for t, (i, e) in enumerate(zip(result.trace, result.pre_errors)):
            r = repr(float(result.rmse[t + 1]))
            w.writerow([t + 1, i, repr(float(e)), r if output_index == 0 else "", r if output_index == 1 else ""])


def read_trace_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
