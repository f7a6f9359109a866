"""Ordinary and smooth backfitting for additive quantile models.

All estimators share one Gauss-Seidel skeleton: components are tabulated on
equidistant grids, updated in index order, and re-centered after every
update so that ``int m_j w_j = 0``, the shift being absorbed by ``m0``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .kernels import KernelSpec, kde_marginal, trapezoid_weights
from .quantile import (
    CheckLossProblem,
    check_loss,
    kernel_weighted_quantiles,
    weighted_quantile,
)

__all__ = [
    "METHODS",
    "Dataset",
    "FitConfig",
    "AdditiveFit",
    "normalize_fit",
    "predict",
    "fit_bf",
    "fit_sbf_grid",
    "fit_sbf_pseudo",
    "fit_quantile",
    "sbf_objective",
]

log = logging.getLogger(__name__)

METHODS = ("BF", "SBF_grid", "SBF_pseudo", "BF_star", "SBF_star")


@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    x: np.ndarray
    intervals: tuple

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ValueError("x must be an n x d matrix matching y")
        if y.size < 1 or x.shape[1] < 1:
            raise ValueError("need n >= 1 observations and d >= 1 covariates")
        intervals = tuple((float(a), float(b)) for a, b in self.intervals)
        if len(intervals) != x.shape[1]:
            raise ValueError("one support interval per covariate required")
        for j, (a, b) in enumerate(intervals):
            if not a < b:
                raise ValueError(f"interval {j} is empty")
            if np.any((x[:, j] < a) | (x[:, j] > b)):
                raise ValueError(f"covariate {j} leaves its interval [{a}, {b}]")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("data must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "intervals", intervals)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_arrays(cls, y, x, intervals=None):
        """Build a dataset, inferring each interval as the data range."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if intervals is None:
            intervals = [(x[:, j].min(), x[:, j].max()) for j in range(x.shape[1])]
        return cls(y, x, intervals)


@dataclass(frozen=True)
class FitConfig:
    grid_size: int = 41
    max_cycles: int = 50
    tol: float = 1e-4
    pseudo_J: int = 10
    normalization_weights: str = "estimated_density"
    work_budget: float = 1e8
    allow_dead_points: bool = False

    def __post_init__(self):
        if self.grid_size < 5:
            raise ValueError("grid_size must be at least 5")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.pseudo_J < 1:
            raise ValueError("pseudo_J must be at least 1")
        if self.normalization_weights not in ("estimated_density", "uniform"):
            raise ValueError(
                "normalization_weights must be 'estimated_density' or 'uniform'"
            )


@dataclass(frozen=True)
class AdditiveFit:
    method: str
    alpha: float | None
    bandwidths: tuple
    intervals: tuple
    grids: tuple
    components: tuple
    m0: float
    iterations_run: int
    converged: bool
    weight_curves: tuple | None = None
    history: tuple = ()
    dead_points: tuple = ()

    @property
    def d(self) -> int:
        return len(self.components)

    def component(self, j: int, xj) -> np.ndarray:
        """Linear interpolation of component ``j`` at ``xj``."""
        return np.interp(xj, self.grids[j], self.components[j])

    def predict(self, x) -> np.ndarray | float:
        return predict(self, x)

    def constraint_residuals(self) -> np.ndarray:
        """Trapezoid values of int m_j w_j, one per component."""
        if self.weight_curves is None:
            raise ValueError("fit carries no normalization weights")
        return np.array([
            trapezoid_weights(g) @ (m * w)
            for g, m, w in zip(self.grids, self.components, self.weight_curves)
        ])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "bandwidths": [float(h) for h in self.bandwidths],
            "intervals": [[float(a), float(b)] for a, b in self.intervals],
            "grids": [np.asarray(g).tolist() for g in self.grids],
            "components": [np.asarray(c).tolist() for c in self.components],
            "m0": float(self.m0),
            "iterations_run": int(self.iterations_run),
            "converged": bool(self.converged),
        }

    def to_json(self, **kwargs) -> str:
        # json emits repr() of floats, i.e. shortest round-tripping digits
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, doc: dict) -> "AdditiveFit":
        return cls(
            method=doc["method"],
            alpha=doc["alpha"],
            bandwidths=tuple(doc["bandwidths"]),
            intervals=tuple(tuple(iv) for iv in doc["intervals"]),
            grids=tuple(np.asarray(g, dtype=float) for g in doc["grids"]),
            components=tuple(np.asarray(c, dtype=float) for c in doc["components"]),
            m0=float(doc["m0"]),
            iterations_run=int(doc["iterations_run"]),
            converged=bool(doc["converged"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "AdditiveFit":
        return cls.from_dict(json.loads(text))


def _center(grid, values, weights) -> float:
    q = trapezoid_weights(grid) * weights
    total = q.sum()
    if not total > 0:
        raise ValueError("normalization weight curve has zero integral")
    return float(q @ values / total)


def normalize_fit(fit: AdditiveFit, weight_curves) -> AdditiveFit:
    """Center every component against its weight curve; m0 absorbs the shifts."""
    curves = tuple(np.asarray(w, dtype=float) for w in weight_curves)
    if len(curves) != fit.d:
        raise ValueError("one weight curve per component required")
    comps, m0 = [], fit.m0
    for g, m, w in zip(fit.grids, fit.components, curves):
        if w.shape != g.shape or np.any(w < 0):
            raise ValueError("weight curves must be nonnegative and match the grids")
        c = _center(g, m, w)
        comps.append(m - c)
        m0 += c
    return replace(fit, components=tuple(comps), m0=m0, weight_curves=curves)


def predict(fit: AdditiveFit, x):
    """m0 + sum_j m_j(x_j) with linear interpolation between grid nodes."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != fit.d:
        raise ValueError(f"expected {fit.d} coordinates, got {x.shape[1]}")
    out = np.full(x.shape[0], fit.m0)
    for j, (a, b) in enumerate(fit.intervals):
        if np.any((x[:, j] < a) | (x[:, j] > b)):
            raise ValueError(f"coordinate {j} outside [{a}, {b}]")
        out += fit.component(j, x[:, j])
    return float(out[0]) if single else out


# -- shared machinery -------------------------------------------------------

@dataclass
class _Setup:
    """Per-fit tabulations that stay fixed across cycles."""

    specs: list
    grids: list
    quad: list
    kernel: list          # kernel[j][g, i] = K_j(grid_j[g], X_j^i)
    weight_curves: list
    dead: list = field(default_factory=list)


def _prepare(x, intervals, bandwidths, config: FitConfig) -> _Setup:
    n, d = x.shape
    bandwidths = np.broadcast_to(np.asarray(bandwidths, dtype=float), (d,))
    specs = [KernelSpec(float(h), a, b) for h, (a, b) in zip(bandwidths, intervals)]
    grids = [np.linspace(a, b, config.grid_size) for a, b in intervals]
    kernel = [s(g[:, None], x[None, :, j]) for j, (s, g) in enumerate(zip(specs, grids))]
    for j, k in enumerate(kernel):
        if not config.allow_dead_points and np.any(k.sum(axis=1) <= 0):
            raise ValueError(
                f"bandwidth {specs[j].bandwidth} leaves grid points of component "
                f"{j} without data; increase the bandwidth"
            )
    if config.normalization_weights == "uniform":
        curves = [np.ones_like(g) for g in grids]
    else:
        curves = [kde_marginal(x[:, j], s, g) for j, (s, g) in enumerate(zip(specs, grids))]
    return _Setup(specs, grids, [trapezoid_weights(g) for g in grids], kernel,
                  curves, [np.zeros(g.size, dtype=bool) for g in grids])


def _iqr_scale(y) -> float:
    q75, q25 = np.percentile(y, [75, 25])
    return float(q75 - q25) if q75 > q25 else 1.0


def _backfit(setup: _Setup, m0: float, update: Callable, config: FitConfig,
             scale: float, method: str, alpha, intervals,
             cycles: int | None = None) -> AdditiveFit:
    """Gauss-Seidel cycles of ``update(j, comps, m0) -> (values, dead)``.

    With ``cycles`` given, exactly that many cycles are run regardless of
    the stopping rule.
    """
    comps = [np.zeros(g.size) for g in setup.grids]
    tol = config.tol * scale
    history = []
    converged = False
    n_cycles = cycles if cycles is not None else config.max_cycles
    it = 0
    for it in range(1, n_cycles + 1):
        before = [c.copy() for c in comps]
        for j in range(len(comps)):
            values, dead = update(j, comps, m0)
            setup.dead[j] |= dead
            c = _center(setup.grids[j], values, setup.weight_curves[j])
            comps[j] = values - c
            m0 += c
        change = max(float(np.max(np.abs(c - b))) for c, b in zip(comps, before))
        history.append(change)
        log.debug("%s cycle %d: max change %.3g", method, it, change)
        if change < tol:
            converged = True
            if cycles is None:
                break
    if not converged:
        log.info("%s stopped after %d cycles without converging", method, it)
    return AdditiveFit(
        method=method,
        alpha=alpha,
        bandwidths=tuple(float(s.bandwidth) for s in setup.specs),
        intervals=tuple(intervals),
        grids=tuple(setup.grids),
        components=tuple(comps),
        m0=float(m0),
        iterations_run=it,
        converged=converged,
        weight_curves=tuple(setup.weight_curves),
        history=tuple(history),
        dead_points=tuple(np.flatnonzero(dd) for dd in setup.dead),
    )


def _check_fit_inputs(data: Dataset, alpha: float):
    if data.n < 2:
        raise ValueError("need at least two observations")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def _start_m0(y, alpha) -> float:
    return weighted_quantile(CheckLossProblem(y, np.ones(y.size), alpha))


def _interp_others(j, comps, grids, points, shape):
    """sum_{l != j} m_l(points[l]), where points[l] are arrays of ``shape``."""
    total = np.zeros(shape)
    for l, (g, c) in enumerate(zip(grids, comps)):
        if l != j:
            total += np.interp(points[l], g, c)
    return total


# -- quantile estimators ----------------------------------------------------

def fit_bf(data: Dataset, alpha: float, bandwidths, config: FitConfig | None = None,
           cycles: int | None = None) -> AdditiveFit:
    """Ordinary backfitting with local-constant kernel quantile updates."""
    config = config or FitConfig()
    _check_fit_inputs(data, alpha)
    setup = _prepare(data.x, data.intervals, bandwidths, config)
    rows = np.arange(data.n)
    cols = [data.x[:, l] for l in range(data.d)]
    orders = [None] * data.d

    def update(j, comps, m0):
        resid = data.y - m0 - _interp_others(j, comps, setup.grids, cols, data.n)
        values, dead, orders[j] = kernel_weighted_quantiles(
            resid, rows, setup.kernel[j], alpha, previous=comps[j], order=orders[j])
        return values, dead

    return _backfit(setup, _start_m0(data.y, alpha), update, config,
                    _iqr_scale(data.y), "BF", alpha, data.intervals, cycles)


def _grid_expansion(j, setup: _Setup, n: int):
    """Nonzero entries of prod_{l != j} K_l(u_l, X_l^i) q_l(u_l) over the product grid.

    Returns the observation index, the grid index per other coordinate, and
    the composite weight of every retained (i, u) pair.
    """
    others = [l for l in range(len(setup.grids)) if l != j]
    b = np.ones(n)
    for l in others:
        kq = (setup.kernel[l] * setup.quad[l][:, None]).T       # (n, G_l)
        b = b[..., None] * kq.reshape((n,) + (1,) * (b.ndim - 1) + (kq.shape[1],))
    flat = b.reshape(n, -1)
    rows, cols = np.nonzero(flat)
    sizes = [setup.grids[l].size for l in others]
    uidx = np.unravel_index(cols, sizes) if others else ()
    return rows, dict(zip(others, uidx)), flat[rows, cols]


def fit_sbf_grid(data: Dataset, alpha: float, bandwidths,
                 config: FitConfig | None = None,
                 cycles: int | None = None) -> AdditiveFit:
    """Smooth backfitting with the integrals discretized on the fit grids.

    The update of ``m_j(x_j)`` is the weighted quantile of the residuals
    ``Y_i - m0 - sum_{l != j} m_l(u_l)`` over observations and product-grid
    points ``u``, weighted by ``K_j(x_j, X_j^i) prod_l K_l(u_l, X_l^i) q_l(u_l)``.
    """
    config = config or FitConfig()
    _check_fit_inputs(data, alpha)
    work = data.d * config.grid_size ** (data.d - 1) * data.n
    if work > config.work_budget:
        raise ValueError(
            f"grid smooth backfitting needs {work:.3g} terms per update, over the "
            f"budget {config.work_budget:.3g}; use SBF_pseudo or a coarser grid"
        )
    setup = _prepare(data.x, data.intervals, bandwidths, config)
    expansions = [_grid_expansion(j, setup, data.n) for j in range(data.d)]
    orders = [None] * data.d

    def update(j, comps, m0):
        rows, uidx, base = expansions[j]
        resid = data.y[rows] - m0
        for l, idx in uidx.items():
            resid = resid - comps[l][idx]
        values, dead, orders[j] = kernel_weighted_quantiles(
            resid, rows, setup.kernel[j], alpha, base=base,
            previous=comps[j], order=orders[j])
        return values, dead

    return _backfit(setup, _start_m0(data.y, alpha), update, config,
                    _iqr_scale(data.y), "SBF_grid", alpha, data.intervals, cycles)


def pseudo_points(data: Dataset, specs: Sequence[KernelSpec], J: int) -> list:
    """Deterministic points U[l][i, k] at kernel-CDF levels (k + 1) / (J + 1)."""
    levels = np.arange(1, J + 1) / (J + 1.0)
    return [s.inverse_cdf(data.x[:, l][:, None], levels[None, :])
            for l, s in enumerate(specs)]


def fit_sbf_pseudo(data: Dataset, alpha: float, bandwidths,
                   config: FitConfig | None = None,
                   cycles: int | None = None) -> AdditiveFit:
    """Smooth backfitting through ordinary backfitting on J*n pseudo-observations.

    When component ``j`` is updated, row ``(i, k)`` carries the response
    ``Y_i``, the kernel weight of the original ``X_j^i`` and, for every other
    coordinate, the deterministic pseudo-point ``U_l[i, k]``.
    """
    config = config or FitConfig()
    _check_fit_inputs(data, alpha)
    setup = _prepare(data.x, data.intervals, bandwidths, config)
    J = config.pseudo_J
    upts = [u.ravel() for u in pseudo_points(data, setup.specs, J)]
    rows = np.repeat(np.arange(data.n), J)
    y_rows = data.y[rows]
    orders = [None] * data.d

    def update(j, comps, m0):
        resid = y_rows - m0 - _interp_others(j, comps, setup.grids, upts, rows.size)
        values, dead, orders[j] = kernel_weighted_quantiles(
            resid, rows, setup.kernel[j], alpha, previous=comps[j], order=orders[j])
        return values, dead

    return _backfit(setup, _start_m0(data.y, alpha), update, config,
                    _iqr_scale(data.y), "SBF_pseudo", alpha, data.intervals, cycles)


_QUANTILE_FITS = {"BF": fit_bf, "SBF_grid": fit_sbf_grid, "SBF_pseudo": fit_sbf_pseudo}


def fit_quantile(method: str, data: Dataset, alpha: float, bandwidths,
                 config: FitConfig | None = None) -> AdditiveFit:
    try:
        fit = _QUANTILE_FITS[method]
    except KeyError:
        raise ValueError(f"unknown quantile method {method!r}") from None
    return fit(data, alpha, bandwidths, config)


def sbf_objective(fit: AdditiveFit, data: Dataset) -> float:
    """Grid-discretized smooth backfitting objective at ``fit``.

    sum_i sum_u tau_alpha(Y_i - m0 - sum_j m_j(u_j)) prod_j K_j(u_j, X_j^i) q_j(u_j)
    over the full product grid; cost grows as n * G^d.
    """
    specs = [KernelSpec(h, a, b) for h, (a, b) in zip(fit.bandwidths, fit.intervals)]
    kq = [(s(g[:, None], data.x[None, :, j]) * trapezoid_weights(g)[:, None]).T
          for j, (s, g) in enumerate(zip(specs, fit.grids))]
    fitted = np.zeros(())
    for c in fit.components:
        fitted = fitted[..., None] + c
    total = 0.0
    for i in range(data.n):
        w = np.ones(())
        for k in kq:
            w = w[..., None] * k[i]
        total += float((w * check_loss(data.y[i] - fit.m0 - fitted, fit.alpha)).sum())
    return total
