"""Primal active-set solver for strictly convex QPs with box constraints only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass
class BoxQPResult:
    x: np.ndarray
    at_lower: np.ndarray
    at_upper: np.ndarray
    iterations: int


def solve_box_qp(H, c, lower, upper, x0=None, at_lower=None, at_upper=None, max_iter=None) -> BoxQPResult:
    """Minimize ``0.5 x'Hx + c'x`` subject to ``lower <= x <= upper``.

    ``H`` must be symmetric positive definite. ``x0`` and the bound masks
    warm-start the working set; each iteration either walks to a blocking
    bound or releases the bound with the most negative multiplier.
    """
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = c.size
    assert np.all(lower <= upper), "infeasible box"
    max_iter = 10 * n + 10 if max_iter is None else max_iter

    x = np.clip(np.zeros(n) if x0 is None else np.asarray(x0, float), lower, upper)
    lo = np.zeros(n, bool) if at_lower is None else np.array(at_lower, bool)
    up = np.zeros(n, bool) if at_upper is None else np.array(at_upper, bool)
    up &= ~lo
    x[lo] = lower[lo]
    x[up] = upper[up]
    tol = 1e-12 * max(1.0, float(np.max(np.abs(c), initial=0.0)), float(np.max(np.abs(H), initial=0.0)))

    stationary = False
    for it in range(1, max_iter + 1):
        if not stationary:
            free = ~(lo | up)
            target = x.copy()
            if free.any():
                rhs = -(c[free] + H[np.ix_(free, ~free)] @ x[~free])
                target[free] = cho_solve(cho_factor(H[np.ix_(free, free)]), rhs)
            p = target - x
            if np.max(np.abs(p), initial=0.0) > 1e-14 * (1.0 + np.max(np.abs(x), initial=0.0)):
                with np.errstate(divide="ignore", invalid="ignore"):
                    t_lo = np.where(free & (p < 0), (lower - x) / p, np.inf)
                    t_up = np.where(free & (p > 0), (upper - x) / p, np.inf)
                t_all = np.minimum(t_lo, t_up)
                k = int(np.argmin(t_all))
                if t_all[k] < 1.0:
                    x = np.clip(x + max(float(t_all[k]), 0.0) * p, lower, upper)
                    if t_lo[k] <= t_up[k]:
                        lo[k] = True
                        x[k] = lower[k]
                    else:
                        up[k] = True
                        x[k] = upper[k]
                    continue
                x = np.clip(target, lower, upper)
            stationary = True

        grad = H @ x + c
        # multipliers: grad >= 0 at a lower bound, grad <= 0 at an upper bound
        viol = np.where(lo, -grad, 0.0) + np.where(up, grad, 0.0)
        k = int(np.argmax(viol))
        if viol[k] <= tol:
            return BoxQPResult(x, lo, up, it)
        lo[k] = up[k] = False
        stationary = False

    raise RuntimeError(f"box QP did not terminate within {max_iter} iterations")
