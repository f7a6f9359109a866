"""Check loss and exact weighted-quantile minimization."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "CheckLossProblem",
    "check_loss",
    "check_objective",
    "weighted_quantile",
    "kernel_weighted_quantiles",
]


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def check_loss(u, alpha: float):
    """tau_alpha(u) = u (alpha - 1{u < 0})."""
    _check_alpha(alpha)
    u = np.asarray(u, dtype=float)
    return u * (alpha - (u < 0))


@dataclass(frozen=True)
class CheckLossProblem:
    residuals: np.ndarray
    weights: np.ndarray
    alpha: float

    def __post_init__(self):
        r = np.asarray(self.residuals, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if r.size == 0:
            raise ValueError("empty check-loss problem")
        if r.shape != w.shape:
            raise ValueError("residuals and weights differ in length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if not w.sum() > 0:
            raise ValueError("total weight must be positive")
        _check_alpha(self.alpha)
        object.__setattr__(self, "residuals", r)
        object.__setattr__(self, "weights", w)


def check_objective(theta, problem: CheckLossProblem):
    """sum_i w_i tau_alpha(r_i - theta); vectorized over ``theta``."""
    theta = np.asarray(theta, dtype=float)
    diff = problem.residuals - theta[..., None]
    return (problem.weights * check_loss(diff, problem.alpha)).sum(axis=-1)


def weighted_quantile(problem: CheckLossProblem) -> float:
    """Smallest minimizer of theta -> sum_i w_i tau_alpha(r_i - theta).

    The residuals are sorted stably and the first one whose cumulative
    weight reaches ``alpha * total`` is returned, so the result is always one
    of the inputs.  The search range is implicitly [min r, max r].
    """
    order = np.argsort(problem.residuals, kind="stable")
    cum = np.cumsum(problem.weights[order])
    k = int(np.searchsorted(cum, problem.alpha * cum[-1], side="left"))
    return float(problem.residuals[order[min(k, cum.size - 1)]])


@numba.njit(cache=True)
def _scan(sorted_resid, sorted_base, sorted_rows, kernel, alpha, previous):
    n_grid = kernel.shape[0]
    m = sorted_resid.shape[0]
    out = previous.copy()
    dead = np.zeros(n_grid, dtype=np.bool_)
    for g in range(n_grid):
        krow = kernel[g]
        total = 0.0
        for k in range(m):
            total += krow[sorted_rows[k]] * sorted_base[k]
        if total <= 0.0:
            dead[g] = True
            continue
        target = alpha * total
        cum = 0.0
        pick = m - 1
        for k in range(m):
            cum += krow[sorted_rows[k]] * sorted_base[k]
            if cum >= target:
                pick = k
                break
        out[g] = sorted_resid[pick]
    return out, dead


def kernel_weighted_quantiles(resid, rows, kernel, alpha, base=None,
                              previous=None, order=None):
    """Weighted alpha-quantiles of one residual multiset under many weightings.

    Entry ``k`` of ``resid`` carries weight ``kernel[g, rows[k]] * base[k]``
    for evaluation point ``g``.  Each row of the result equals
    ``weighted_quantile`` of the corresponding problem; points whose total
    weight vanishes keep ``previous[g]`` and are reported in ``dead``.

    ``order`` may hold a previous sort permutation; reusing it makes the
    stable sort close to linear when residuals change little.
    """
    resid = np.asarray(resid, dtype=float)
    rows = np.asarray(rows, dtype=np.int64)
    kernel = np.ascontiguousarray(kernel, dtype=float)
    if base is None:
        base = np.ones(resid.size)
    if previous is None:
        previous = np.zeros(kernel.shape[0])
    if order is None:
        order = np.argsort(resid, kind="stable")
    else:
        order = order[np.argsort(resid[order], kind="stable")]
    values, dead = _scan(resid[order], np.asarray(base, dtype=float)[order],
                         rows[order], kernel, float(alpha),
                         np.asarray(previous, dtype=float))
    return values, dead, order
