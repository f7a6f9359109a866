"""Boundary-corrected kernels on bounded intervals.

The corrected kernel for a data point ``u`` in ``[a, b]`` is

    K_g(x, u) = K((x - u) / g) / g / M(u),   M(u) = int_a^b K((x - u) / g) / g dx,

so that ``x -> K_g(x, u)`` is a probability density on ``[a, b]``.  For the
Epanechnikov kernel ``M(u)`` has a closed form through the kernel CDF.

Any kernel added to ``BASE_KERNELS`` must be nonnegative, bounded, Lipschitz,
supported on ``[-1, 1]``, integrate to one, and have zero first moment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BASE_KERNELS",
    "KernelSpec",
    "epanechnikov",
    "epanechnikov_cdf",
    "base_kernel_eval",
    "corrected_kernel_eval",
    "kernel_cdf",
    "kernel_cdf_inverse",
    "kde_marginal",
    "weighted_kde_pairwise",
    "trapezoid_weights",
]

# int K(v)^2 dv for the Epanechnikov kernel
EPANECHNIKOV_ROUGHNESS = 0.6


def epanechnikov(u):
    """K(u) = 0.75 (1 - u^2) on |u| <= 1, zero elsewhere."""
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def epanechnikov_cdf(t):
    """F(t) = 0.5 + 0.75 t - 0.25 t^3 with t clipped to [-1, 1]."""
    t = np.clip(np.asarray(t, dtype=float), -1.0, 1.0)
    return 0.5 + 0.75 * t - 0.25 * t * t * t


BASE_KERNELS = {"epanechnikov": (epanechnikov, epanechnikov_cdf)}


@dataclass(frozen=True)
class KernelSpec:
    """Base kernel, bandwidth and support interval of one coordinate."""

    bandwidth: float
    a: float
    b: float
    base: str = "epanechnikov"

    def __post_init__(self):
        if self.base not in BASE_KERNELS:
            raise ValueError(f"unknown base kernel {self.base!r}")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if not self.a < self.b:
            raise ValueError(f"empty interval [{self.a}, {self.b}]")

    @property
    def pdf(self):
        return BASE_KERNELS[self.base][0]

    @property
    def cdf(self):
        return BASE_KERNELS[self.base][1]

    def _check_points(self, u):
        u = np.asarray(u, dtype=float)
        if np.any((u < self.a) | (u > self.b)) or np.any(np.isnan(u)):
            raise ValueError(
                f"kernel centers must lie in [{self.a}, {self.b}]"
            )
        return u

    def mass(self, u):
        """Mass of the scaled kernel centered at ``u`` that falls in [a, b]."""
        u = np.asarray(u, dtype=float)
        g = self.bandwidth
        return self.cdf((self.b - u) / g) - self.cdf((self.a - u) / g)

    def __call__(self, x, u):
        """Corrected kernel K_g(x, u), broadcasting over ``x`` and ``u``."""
        u = self._check_points(u)
        x = np.asarray(x, dtype=float)
        g = self.bandwidth
        out = self.pdf((x - u) / g) / g / self.mass(u)
        return np.where((x < self.a) | (x > self.b), 0.0, out)

    def cdf_at(self, t, u):
        """P(X <= t) for X with density x -> K_g(x, u) on [a, b]."""
        u = self._check_points(u)
        t = np.clip(np.asarray(t, dtype=float), self.a, self.b)
        g = self.bandwidth
        lo = self.cdf((self.a - u) / g)
        return (self.cdf((t - u) / g) - lo) / self.mass(u)

    def inverse_cdf(self, u, p, tol: float = 1e-10, max_iter: int = 50):
        """Solve cdf_at(t, u) = p by bisection and Newton; vectorized over ``u`` and ``p``."""
        u = self._check_points(u)
        p = np.asarray(p, dtype=float)
        if np.any((p <= 0.0) | (p >= 1.0)):
            raise ValueError("probability levels must lie in (0, 1)")
        u, p = np.broadcast_arrays(u, p)
        g = self.bandwidth
        lo = np.maximum(self.a, u - g)
        hi = np.minimum(self.b, u + g)
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            below = self.cdf_at(mid, u) < p
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= tol):
                break
        # Newton polish to machine precision, kept inside the bracket
        t = 0.5 * (lo + hi)
        for _ in range(2):
            dens = self(t, u)
            step = np.where(dens > 0, (self.cdf_at(t, u) - p) / np.where(dens > 0, dens, 1.0), 0.0)
            t = np.where((t - step >= lo) & (t - step <= hi), t - step, t)
        return t


def base_kernel_eval(u, base: str = "epanechnikov"):
    return BASE_KERNELS[base][0](u)


def corrected_kernel_eval(x, u, spec: KernelSpec):
    return spec(x, u)


def kernel_cdf(t, u, spec: KernelSpec):
    return spec.cdf_at(t, u)


def kernel_cdf_inverse(u, spec: KernelSpec, p):
    """Point ``t`` with int_a^t K_g(x, u) dx = p."""
    return spec.inverse_cdf(u, p)


def trapezoid_weights(grid) -> np.ndarray:
    """Quadrature weights so that ``w @ f(grid)`` is the trapezoid rule."""
    grid = np.asarray(grid, dtype=float)
    if grid.size < 2:
        raise ValueError("trapezoid rule needs at least two nodes")
    dx = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    return w


def _check_weights(weights, n):
    if weights is None:
        return np.ones(n)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,):
        raise ValueError("weights must have one entry per sample")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    return weights


def kde_marginal(samples, spec: KernelSpec, grid, weights=None) -> np.ndarray:
    """(Weighted) kernel density estimate n^-1 sum_i w_i K_g(x, X_i) on ``grid``."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("empty sample")
    w = _check_weights(weights, samples.size)
    grid = np.asarray(grid, dtype=float)
    kmat = spec(grid[:, None], samples[None, :])
    return kmat @ w / samples.size


def weighted_kde_pairwise(samples_j, samples_l, spec_j: KernelSpec,
                          spec_l: KernelSpec, grid_j, grid_l,
                          weights=None) -> np.ndarray:
    """Weighted product-kernel density estimate on ``grid_j x grid_l``."""
    samples_j = np.asarray(samples_j, dtype=float).ravel()
    samples_l = np.asarray(samples_l, dtype=float).ravel()
    if samples_j.size == 0:
        raise ValueError("empty sample")
    if samples_j.shape != samples_l.shape:
        raise ValueError("paired samples must have equal length")
    w = _check_weights(weights, samples_j.size)
    kj = spec_j(np.asarray(grid_j, dtype=float)[:, None], samples_j[None, :])
    kl = spec_l(np.asarray(grid_l, dtype=float)[:, None], samples_l[None, :])
    return (kj * w) @ kl.T / samples_j.size
