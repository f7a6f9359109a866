"""Weighted least-squares backfitting on the pseudo-response model.

Here ``Z_i = m0 + sum_j m_j(X_j^i) + eta_i`` with
``eta_i = -(1{eps_i <= 0} - alpha) / f(0 | X_i)``.  Each observation is
weighted by ``f(0 | X_i)``, so the local-constant updates are weighted
Nadaraya-Watson smoothers.  Both estimators reuse the Gauss-Seidel skeleton
of the quantile fits and differ from them only in the per-point update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backfit import FitConfig, _backfit, _interp_others, _iqr_scale, _prepare

__all__ = ["WeightedDataset", "fit_bf_star", "fit_sbf_star", "weighted_nw"]


@dataclass(frozen=True)
class WeightedDataset:
    z: np.ndarray
    x: np.ndarray
    weights: np.ndarray
    intervals: tuple

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if x.shape[0] != z.size or w.size != z.size:
            raise ValueError("z, x and weights must have consistent lengths")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be strictly positive and finite")
        intervals = tuple((float(a), float(b)) for a, b in self.intervals)
        if len(intervals) != x.shape[1]:
            raise ValueError("one support interval per covariate required")
        for j, (a, b) in enumerate(intervals):
            if not a < b or np.any((x[:, j] < a) | (x[:, j] > b)):
                raise ValueError(f"covariate {j} leaves its interval [{a}, {b}]")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "intervals", intervals)

    @property
    def n(self) -> int:
        return self.z.size

    @property
    def d(self) -> int:
        return self.x.shape[1]


def weighted_nw(kernel, response, weights, previous):
    """sum_i r_i w_i K[g, i] / sum_i w_i K[g, i]; empty rows keep ``previous``."""
    den = kernel @ weights
    num = kernel @ (response * weights)
    dead = den <= 0
    out = np.where(dead, previous, num / np.where(dead, 1.0, den))
    return out, dead


def _start(wdata: WeightedDataset, config):
    if wdata.n < 2:
        raise ValueError("need at least two observations")
    config = config or FitConfig()
    m0 = float(wdata.weights @ wdata.z / wdata.weights.sum())
    return config, m0


def fit_bf_star(wdata: WeightedDataset, bandwidths, config: FitConfig | None = None,
                alpha: float | None = None, cycles: int | None = None):
    """Weighted ordinary backfitting of the pseudo-responses."""
    config, m0 = _start(wdata, config)
    setup = _prepare(wdata.x, wdata.intervals, bandwidths, config)
    cols = [wdata.x[:, l] for l in range(wdata.d)]

    def update(j, comps, m0):
        resid = wdata.z - m0 - _interp_others(j, comps, setup.grids, cols, wdata.n)
        return weighted_nw(setup.kernel[j], resid, wdata.weights, comps[j])

    return _backfit(setup, m0, update, config, _iqr_scale(wdata.z), "BF_star",
                    alpha, wdata.intervals, cycles)


def fit_sbf_star(wdata: WeightedDataset, bandwidths, config: FitConfig | None = None,
                 alpha: float | None = None, cycles: int | None = None):
    """Weighted smooth backfitting of the pseudo-responses.

    m_j(x_j) = m~_j(x_j) - m0 - sum_{l != j} int m_l(x_l) f^w_{jl}(x_j, x_l) / f^w_j(x_j) dx_l,
    with the integrals evaluated by the trapezoid rule on the component grids.
    """
    config, m0 = _start(wdata, config)
    setup = _prepare(wdata.x, wdata.intervals, bandwidths, config)
    n, w = wdata.n, wdata.weights
    # f^w_j and the weighted NW curve m~_j on each grid
    dens = [k @ w / n for k in setup.kernel]
    dead = [f <= 0 for f in dens]
    safe = [np.where(dd, 1.0, f) for dd, f in zip(dead, dens)]
    nw = [k @ (w * wdata.z) / n / f for k, f in zip(setup.kernel, safe)]
    # cond[j][l][g, g'] = f^w_{jl}(x_g, x_g') q_l(g') / f^w_j(x_g)
    cond = {}
    for j in range(wdata.d):
        for l in range(wdata.d):
            if l != j:
                pair = (setup.kernel[j] * w) @ setup.kernel[l].T / n
                cond[j, l] = pair * setup.quad[l][None, :] / safe[j][:, None]

    def update(j, comps, m0):
        values = nw[j] - m0
        for l in range(wdata.d):
            if l != j:
                values = values - cond[j, l] @ comps[l]
        return np.where(dead[j], comps[j], values), dead[j]

    return _backfit(setup, m0, update, config, _iqr_scale(wdata.z), "SBF_star",
                    alpha, wdata.intervals, cycles)
