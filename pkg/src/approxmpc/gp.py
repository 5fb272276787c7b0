"""Gaussian-process regression with the arcsine (neural-network) kernel."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SF_BOUNDS = (1e-6, 1e4)
LAMBDA_BOUNDS = (1e-6, 1e4)
SIGMA2_BOUNDS = (1e-10, 1e2)


class IllConditionedError(LinAlgError):
    """K + sigma^2 I is not numerically positive definite."""


class KernelDomainError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class GpHyperparams:
    s_f: float
    lam: np.ndarray
    sigma2: float

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float).ravel()
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "s_f", float(self.s_f))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if not (self.s_f > 0 and self.sigma2 > 0 and np.all(lam > 0)):
            raise ValueError(f"hyperparameters must be positive: {self}")

    @classmethod
    def default(cls, n_features: int, s_f=1.0, lam=1.0, sigma2=1e-4) -> "GpHyperparams":
        return cls(s_f, np.full(n_features + 1, lam), sigma2)

    def to_log_vector(self) -> np.ndarray:
        return np.concatenate([[math.log(self.s_f)], np.log(self.lam), [math.log(self.sigma2)]])

    @classmethod
    def from_log_vector(cls, theta) -> "GpHyperparams":
        theta = np.asarray(theta, float)
        return cls(math.exp(theta[0]), np.exp(theta[1:-1]), math.exp(theta[-1]))

    def to_dict(self) -> dict:
        return {"s_f": self.s_f, "lambda": [float(x) for x in self.lam], "sigma2": self.sigma2}

    @classmethod
    def from_dict(cls, d) -> "GpHyperparams":
        return cls(d["s_f"], d["lambda"], d["sigma2"])

    def __eq__(self, other):
        if not isinstance(other, GpHyperparams):
            return NotImplemented
        return self.s_f == other.s_f and self.sigma2 == other.sigma2 and np.array_equal(self.lam, other.lam)

    __hash__ = None


def _augment(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _arcsin_checked(arg):
    bad = np.abs(arg) > 1.0 + 1e-12
    if np.any(bad):
        raise KernelDomainError("arcsin argument outside [-1, 1]")
    return np.arcsin(np.clip(arg, -1.0, 1.0))


def nn_kernel(xi, xi_prime, hyper: GpHyperparams) -> float:
    """Neural-network covariance between two feature vectors."""
    a = np.concatenate([[1.0], np.asarray(xi, float).ravel()])
    b = np.concatenate([[1.0], np.asarray(xi_prime, float).ravel()])
    lam = hyper.lam
    num = a @ (lam * b)
    den = math.sqrt((1.0 + 2.0 * a @ (lam * a)) * (1.0 + 2.0 * b @ (lam * b)))
    return float(hyper.s_f * _arcsin_checked(num / den))


def kernel_matrix(A, B, hyper: GpHyperparams) -> np.ndarray:
    """Cross-covariance between the rows of ``A`` and ``B``."""
    At, Bt = _augment(A), _augment(B)
    lam = hyper.lam
    da = 1.0 + 2.0 * np.einsum("ij,ij->i", At * lam, At)
    db = 1.0 + 2.0 * np.einsum("ij,ij->i", Bt * lam, Bt)
    num = (At * lam) @ Bt.T
    return hyper.s_f * _arcsin_checked(num / np.sqrt(np.outer(da, db)))


def gram(features, hyper: GpHyperparams) -> np.ndarray:
    K = kernel_matrix(features, features, hyper)
    return 0.5 * (K + K.T)


def _cholesky(K, sigma2: float):
    n = K.shape[0]
    try:
        return cho_factor(K + sigma2 * np.eye(n), lower=True)
    except LinAlgError as exc:
        raise IllConditionedError(
            "K + sigma^2 I is not positive definite; duplicate features with "
            "conflicting labels or a too small noise variance"
        ) from exc


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.ascontiguousarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "scale", np.ascontiguousarray(self.scale, dtype=np.float64))

    @classmethod
    def identity(cls, n_features: int) -> "Standardizer":
        return cls(np.zeros(n_features), np.ones(n_features))

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.atleast_2d(np.asarray(X, float))
        scale = X.std(axis=0)
        scale[scale <= 1e-12] = 1.0
        return cls(X.mean(axis=0), scale)

    def __call__(self, X) -> np.ndarray:
        return (np.asarray(X, float) - self.mean) / self.scale


@dataclass(eq=False)
class GpModel:
    """Fitted single-output GP holding raw training features and ``alpha``."""

    features: np.ndarray
    labels: np.ndarray
    alpha: np.ndarray
    hyper: GpHyperparams
    output_index: int = 0
    scaler: Standardizer = None
    _fast: tuple = field(default=None, repr=False)
    _chol: tuple = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, float))
        if self.scaler is None:
            self.scaler = Standardizer.identity(self.features.shape[1])
        # fast-path constants: lambda-weighted augmented features, their
        # inverse self-norms and s_f folded into alpha
        Zt = _augment(self.scaler(self.features))
        P = Zt * self.hyper.lam
        inv = 1.0 / np.sqrt(1.0 + 2.0 * np.einsum("ij,ij->i", P, Zt))
        self._fast = (np.ascontiguousarray(P * inv[:, None]), self.hyper.s_f * self.alpha)

    @property
    def n_data(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def cholesky(self):
        if self._chol is None:
            Z = self.scaler(self.features)
            self._chol = _cholesky(gram(Z, self.hyper), self.hyper.sigma2)
        return self._chol

    def predict(self, X) -> np.ndarray:
        """Posterior means for the rows of ``X`` (fast form, batched)."""
        Zt = _augment(self.scaler(X))
        lam = self.hyper.lam
        Pw, a = self._fast
        dq = 1.0 / np.sqrt(1.0 + 2.0 * np.einsum("ij,ij->i", Zt * lam, Zt))
        return np.arcsin(np.clip((Zt @ Pw.T) * dq[:, None], -1.0, 1.0)) @ a

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "output_index": int(self.output_index),
            "n_data": self.n_data,
            "n_features": self.n_features,
            "hyper": self.hyper.to_dict(),
            "standardization": {
                "mean": [float(x) for x in self.scaler.mean],
                "scale": [float(x) for x in self.scaler.scale],
            },
            "features": [[float(x) for x in row] for row in self.features],
            "labels": [float(y) for y in self.labels],
            "alpha": [float(a) for a in self.alpha],
        }

    @classmethod
    def from_dict(cls, d) -> "GpModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')!r}")
        features = np.asarray(d["features"], float).reshape(d["n_data"], d["n_features"])
        alpha = np.asarray(d["alpha"], float)
        if alpha.shape != (d["n_data"],):
            raise ValueError("alpha length does not match n_data")
        st = d["standardization"]
        return cls(
            features=features,
            labels=np.asarray(d["labels"], float),
            alpha=alpha,
            hyper=GpHyperparams.from_dict(d["hyper"]),
            output_index=d["output_index"],
            scaler=Standardizer(np.asarray(st["mean"], float), np.asarray(st["scale"], float)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GpModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_alpha(features, labels, hyper: GpHyperparams, output_index: int = 0, scaler=None) -> GpModel:
    """Solve ``(K + sigma^2 I) alpha = Y`` by Cholesky.

    ``scaler`` may be a :class:`Standardizer`, ``"auto"`` (fit on the
    training features) or ``None`` (kernel on raw features).
    """
    features = np.atleast_2d(np.asarray(features, float))
    labels = np.asarray(labels, float).ravel()
    if labels.shape[0] != features.shape[0]:
        raise ValueError("features and labels disagree in length")
    if scaler == "auto":
        scaler = Standardizer.fit(features)
    elif scaler is None:
        scaler = Standardizer.identity(features.shape[1])
    c = _cholesky(gram(scaler(features), hyper), hyper.sigma2)
    alpha = cho_solve(c, labels)
    return GpModel(features, labels, alpha, hyper, output_index, scaler, _chol=c)


@njit(cache=True)
def _fast_mean(Pw, a, lam, mean, scale, xi):
    d = xi.shape[0]
    zt = np.empty(d + 1)
    zt[0] = 1.0
    q = lam[0]
    for j in range(d):
        z = (xi[j] - mean[j]) / scale[j]
        zt[j + 1] = z
        q += lam[j + 1] * z * z
    dq = 1.0 / math.sqrt(1.0 + 2.0 * q)
    acc = 0.0
    for i in range(Pw.shape[0]):
        s = 0.0
        for j in range(d + 1):
            s += Pw[i, j] * zt[j]
        acc += math.asin(s * dq) * a[i]
    return acc


def posterior_mean_fast(model: GpModel, xi) -> float:
    """``k_*' alpha`` with the precomputed weights; cost is linear in the data size."""
    Pw, a = model._fast
    return _fast_mean(Pw, a, model.hyper.lam, model.scaler.mean, model.scaler.scale, np.asarray(xi, dtype=np.float64))


def posterior_full(model: GpModel, xi):
    """Posterior mean and variance from the Cholesky factor (no precomputed alpha)."""
    Z = model.scaler(model.features)
    z = model.scaler(np.atleast_2d(np.asarray(xi, float)))
    k_star = kernel_matrix(Z, z, model.hyper)[:, 0]
    c = model.cholesky()
    w = cho_solve(c, k_star)
    mean = float(w @ model.labels)
    var = float(kernel_matrix(z, z, model.hyper)[0, 0] - k_star @ w)
    if var < -1e-10:
        log.warning("negative posterior variance %.3e clamped", var)
    return mean, max(var, 0.0)


def log_marginal_likelihood(features, labels, hyper: GpHyperparams) -> float:
    labels = np.asarray(labels, float).ravel()
    n = labels.size
    c = _cholesky(gram(features, hyper), hyper.sigma2)
    a = cho_solve(c, labels)
    return float(-0.5 * labels @ a - np.sum(np.log(np.diag(c[0]))) - 0.5 * n * math.log(2.0 * math.pi))


def optimize_hyperparams(
    features, labels, initial: GpHyperparams, seed: int = 0, restarts: int = 5, maxfev: int = 500
) -> GpHyperparams:
    """Maximize the log marginal likelihood over log-hyperparameters.

    Nelder-Mead from ``initial`` plus ``restarts - 1`` random perturbations of
    it. The data are put in a canonical order first so the result does not
    depend on the order of the training points.
    """
    X = np.atleast_2d(np.asarray(features, float))
    y = np.asarray(labels, float).ravel()
    if X.shape[0] == 0:
        raise ValueError("no training data")
    order = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[order], y[order]

    d = X.shape[1]
    lb = np.log([SF_BOUNDS[0]] + [LAMBDA_BOUNDS[0]] * (d + 1) + [SIGMA2_BOUNDS[0]])
    ub = np.log([SF_BOUNDS[1]] + [LAMBDA_BOUNDS[1]] * (d + 1) + [SIGMA2_BOUNDS[1]])

    def neg_lml(theta):
        try:
            return -log_marginal_likelihood(X, y, GpHyperparams.from_log_vector(np.clip(theta, lb, ub)))
        except (IllConditionedError, KernelDomainError, ValueError):
            return 1e300

    theta0 = np.clip(initial.to_log_vector(), lb, ub)
    f0 = neg_lml(theta0)
    best_theta, best_f = theta0, f0
    rng = np.random.default_rng(seed)
    for r in range(restarts):
        start = theta0 if r == 0 else np.clip(theta0 + rng.normal(0.0, 1.0, theta0.size), lb, ub)
        res = minimize(
            neg_lml, start, method="Nelder-Mead", bounds=list(zip(lb, ub)),
            options={"maxfev": maxfev, "xatol": 1e-6, "fatol": 1e-9},
        )
        if res.fun < best_f:
            best_theta, best_f = res.x, res.fun
    if not best_f < f0:
        log.warning("hyperparameter optimization did not improve the marginal likelihood")
        return initial
    return GpHyperparams.from_log_vector(np.clip(best_theta, lb, ub))
