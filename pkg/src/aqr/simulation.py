"""Monte-Carlo study of the backfitting quantile estimators.

Model:  Y = f1(X1) + f2(X2) + f3(X3) + {s1(X1) + s2(X2) + s3(X3)} U,  U ~ N(0, 1),
with f1(x) = x^3, f2(x) = sin(pi x), f3(x) = 2 exp(-16 x^2), s1 = cos,
s2 = s3 = exp, and X trivariate normal (identity covariance, or unit variances
with 0.9 covariances) truncated to [-1, 1]^3.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from .backfit import AdditiveFit, Dataset, FitConfig, _center, fit_quantile
from .kernels import EPANECHNIKOV_ROUGHNESS
from .mean_backfit import WeightedDataset, fit_bf_star, fit_sbf_star

__all__ = [
    "SimModel",
    "BenchConfig",
    "BenchReport",
    "gen_covariates",
    "gen_response",
    "true_components",
    "oracle_weights",
    "pseudo_responses",
    "ise",
    "support_volume",
    "fit_method",
    "run_benchmark",
    "diff_se",
    "qq_data",
    "qq_correlation",
    "asymptotic_variance",
    "replication_rng",
]

log = logging.getLogger(__name__)

SUPPORT = ((-1.0, 1.0),) * 3
MOMENT_DRAWS = 1_000_000
MOMENT_SEED = 20100101
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class SimModel:
    correlated: bool = False

    @property
    def covariance(self) -> np.ndarray:
        if self.correlated:
            return np.full((3, 3), 0.9) + 0.1 * np.eye(3)
        return np.eye(3)

    @staticmethod
    def f(x) -> np.ndarray:
        """Mean components f_j(x_j), columnwise."""
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 0] ** 3,
                         np.sin(np.pi * x[..., 1]),
                         2.0 * np.exp(-16.0 * x[..., 2] ** 2)], axis=-1)

    @staticmethod
    def sigma(x) -> np.ndarray:
        """Scale components s_j(x_j), columnwise."""
        x = np.asarray(x, dtype=float)
        return np.stack([np.cos(x[..., 0]), np.exp(x[..., 1]), np.exp(x[..., 2])],
                        axis=-1)

    def scale(self, x) -> np.ndarray:
        return self.sigma(x).sum(axis=-1)

    def component(self, j: int, xj, alpha: float) -> np.ndarray:
        """Uncentered quantile component f_j + s_j * Phi^-1(alpha)."""
        xj = np.asarray(xj, dtype=float)
        pts = np.zeros(xj.shape + (3,))
        pts[..., j] = xj
        return self.f(pts)[..., j] + self.sigma(pts)[..., j] * stats.norm.ppf(alpha)


def gen_covariates(n: int, correlated: bool, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampler for the truncated trivariate normal design."""
    if n < 1:
        raise ValueError("n must be positive")
    chol = np.linalg.cholesky(SimModel(correlated).covariance)
    out = np.empty((0, 3))
    while out.shape[0] < n:
        need = n - out.shape[0]
        draw = rng.standard_normal((int(need * 3.5) + 64, 3)) @ chol.T
        keep = draw[np.all(np.abs(draw) < 1.0, axis=1)]
        out = np.vstack([out, keep[:need]])
    return out


def gen_response(x, rng: np.random.Generator | None, model: SimModel | None = None,
                 u=None):
    """Responses and the latent standard normal draws behind them.

    ``u`` overrides the draws (``rng`` is then unused).
    """
    model = model or SimModel()
    x = np.asarray(x, dtype=float)
    if u is None:
        u = rng.standard_normal(x.shape[0])
    u = np.asarray(u, dtype=float)
    return model.f(x).sum(axis=1) + model.scale(x) * u, u


@functools.lru_cache(maxsize=None)
def _design_moments(correlated: bool):
    """Monte-Carlo E f_j(X_j) and E s_j(X_j) under the design."""
    rng = np.random.default_rng([MOMENT_SEED, int(correlated)])
    x = gen_covariates(MOMENT_DRAWS, correlated, rng)
    model = SimModel(correlated)
    return model.f(x).mean(axis=0), model.sigma(x).mean(axis=0)


def centering_constants(alpha: float, model: SimModel) -> np.ndarray:
    """c_j making E m_j(X_j; alpha) = 0."""
    ef, es = _design_moments(model.correlated)
    return -(ef + es * stats.norm.ppf(alpha))


def true_components(alpha: float, model: SimModel, grids: Sequence):
    """(m0, [m_j(grid_j; alpha)]) with each m_j centered under the design."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    c = centering_constants(alpha, model)
    curves = [c[j] + model.component(j, g, alpha) for j, g in enumerate(grids)]
    return float(-c.sum()), curves


def oracle_weights(x, alpha: float, model: SimModel | None = None) -> np.ndarray:
    """f_{eps|X}(0 | x) = phi(Phi^-1(alpha)) / s(x) for eps = s(X)(U - Phi^-1(alpha))."""
    model = model or SimModel()
    return stats.norm.pdf(stats.norm.ppf(alpha)) / model.scale(x)


def pseudo_responses(x, u, alpha: float, model: SimModel | None = None):
    """Pseudo-responses Z and weights f(0 | X) built from the same latent draws."""
    model = model or SimModel()
    x = np.asarray(x, dtype=float)
    q = stats.norm.ppf(alpha)
    eps = model.scale(x) * (np.asarray(u, dtype=float) - q)
    w = oracle_weights(x, alpha, model)
    eta = -((eps <= 0).astype(float) - alpha) / w
    # m0 + sum_j m_j(x_j; alpha) is the true conditional quantile
    truth = model.f(x).sum(axis=1) + model.scale(x) * q
    return truth + eta, w


def support_volume(intervals=SUPPORT) -> float:
    return float(np.prod([b - a for a, b in intervals]))


def ise(fit: AdditiveFit, alpha: float, model: SimModel, eval_sample,
        per_volume: bool = False) -> float:
    """Monte-Carlo integrated squared error of the summed components.

    The true components are re-centered with the fit's own normalization
    weights so both sides obey the same constraint; m0 does not enter.
    With ``per_volume`` the integral int err^2 f_X dx is divided by the
    volume of the support, i.e. it becomes the average of err^2 f_X over a
    uniform grid on the support.  REFERENCE_MISE values in the acceptance
    tests are on that scale.
    """
    eval_sample = np.asarray(eval_sample, dtype=float)
    if eval_sample.ndim != 2 or eval_sample.shape[0] == 0:
        raise ValueError("empty evaluation sample")
    err = np.zeros(eval_sample.shape[0])
    for j in range(fit.d):
        grid = fit.grids[j]
        truth = model.component(j, eval_sample[:, j], alpha)
        if fit.weight_curves is not None:
            shift = _center(grid, model.component(j, grid, alpha), fit.weight_curves[j])
        else:
            shift = -centering_constants(alpha, model)[j]
        err += fit.component(j, eval_sample[:, j]) - (truth - shift)
    value = float(np.mean(err ** 2))
    return value / support_volume(fit.intervals) if per_volume else value


def fit_method(method: str, x, y, u, alpha: float, h, model: SimModel,
               config: FitConfig | None = None) -> AdditiveFit:
    """Fit one estimator; the starred methods use the pseudo-response model."""
    if method in ("BF_star", "SBF_star"):
        z, w = pseudo_responses(x, u, alpha, model)
        wdata = WeightedDataset(z, x, w, SUPPORT)
        fitter = fit_bf_star if method == "BF_star" else fit_sbf_star
        return fitter(wdata, h, config, alpha=alpha)
    return fit_quantile(method, Dataset(y, x, SUPPORT), alpha, h, config)


# -- benchmark ---------------------------------------------------------------

EQUIVALENT_PAIRS = (("BF", "BF_star"), ("SBF_grid", "SBF_star"))


@dataclass(frozen=True)
class BenchConfig:
    n: int
    alpha_levels: tuple = (0.2, 0.5, 0.8)
    replications: int = 200
    bandwidth_grid: tuple = (0.3, 0.4, 0.5, 0.6, 0.7)
    methods: tuple = ("BF", "SBF_grid", "BF_star", "SBF_star")
    seed: int = 0
    eval_points: int = 5000
    correlated: bool = False
    fit_config: FitConfig = field(default_factory=FitConfig)
    qq_targets: tuple = ()          # (component index from 0, point)
    jobs: int = 1

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not self.bandwidth_grid or any(h <= 0 for h in self.bandwidth_grid):
            raise ValueError("bandwidths must be positive")
        if not self.alpha_levels or any(not 0 < a < 1 for a in self.alpha_levels):
            raise ValueError("alpha levels must lie in (0, 1)")
        unknown = set(self.methods) - {"BF", "SBF_grid", "SBF_pseudo", "BF_star", "SBF_star"}
        if unknown or not self.methods:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.eval_points < 1:
            raise ValueError("eval_points must be positive")


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent generator for replication ``rep`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


def _interior_sup(a: AdditiveFit, b: AdditiveFit) -> float:
    out = 0.0
    for g, ca, cb, h, (lo, hi) in zip(a.grids, a.components, b.components,
                                      a.bandwidths, a.intervals):
        inner = (g >= lo + h) & (g <= hi - h)
        if inner.any():
            out = max(out, float(np.max(np.abs(ca[inner] - cb[inner]))))
    return out


def _run_replication(config: BenchConfig, rep: int) -> dict:
    model = SimModel(config.correlated)
    rng = replication_rng(config.seed, rep)
    x = gen_covariates(config.n, config.correlated, rng)
    y, u = gen_response(x, rng, model)
    evals = gen_covariates(config.eval_points, config.correlated, rng)
    out = {"rep": rep, "ise": [], "qq": [], "sup": []}
    for alpha in config.alpha_levels:
        for h in config.bandwidth_grid:
            fits = {}
            for method in config.methods:
                fit = fit_method(method, x, y, u, alpha, h, model, config.fit_config)
                fits[method] = fit
                out["ise"].append((method, alpha, h, ise(fit, alpha, model, evals)))
                for j, point in config.qq_targets:
                    out["qq"].append((method, alpha, h, j, point,
                                      float(fit.component(j, point))))
            for pair in EQUIVALENT_PAIRS:
                if all(m in fits for m in pair):
                    out["sup"].append((pair[0], alpha, h,
                                       _interior_sup(fits[pair[0]], fits[pair[1]])))
    return out


def _safe_replication(config: BenchConfig, rep: int) -> dict:
    try:
        return _run_replication(config, rep)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("replication %d failed: %s", rep, exc)
        return {"rep": rep, "error": str(exc)}


@dataclass
class BenchReport:
    config: BenchConfig
    records: list                     # (method, alpha, h, rep, ise)
    qq_values: dict                   # (method, alpha, h, j, point) -> [value per rep]
    sup_distances: dict               # (method, alpha, h) -> [sup |fit - starred fit|]
    failures: list = field(default_factory=list)

    @property
    def reps(self) -> list:
        return sorted({r[3] for r in self.records})

    def subset(self, reps) -> "BenchReport":
        """The report restricted to the given replication indices.

        Replications are seeded independently, so this equals a fresh run
        over exactly those indices.
        """
        keep = set(reps)
        # per-replication lists are stored in the order of self.reps
        pos = [k for k, r in enumerate(self.reps) if r in keep]
        return BenchReport(
            config=replace(self.config, replications=len(keep)),
            records=[r for r in self.records if r[3] in keep],
            qq_values={k: [v[p] for p in pos] for k, v in self.qq_values.items()},
            sup_distances={k: [v[p] for p in pos] for k, v in self.sup_distances.items()},
            failures=[f for f in self.failures if f[0] in keep],
        )

    def ise_values(self, method: str, alpha: float, h: float) -> np.ndarray:
        rows = sorted((r[3], r[4]) for r in self.records
                      if r[0] == method and r[1] == alpha and r[2] == h)
        return np.array([v for _, v in rows])

    def mise(self, method: str, alpha: float, h: float, per_volume: bool = False) -> float:
        value = float(np.mean(self.ise_values(method, alpha, h)))
        return value / support_volume() if per_volume else value

    def reference_method(self, method: str) -> str:
        """Estimator whose MISE picks the bandwidth reported for ``method``."""
        family = ("BF",) if method in ("BF", "BF_star") else ("SBF_grid", "SBF_pseudo")
        for ref in family:
            if ref in self.config.methods:
                return ref
        return method

    def optimal_h(self, method: str, alpha: float) -> float:
        ref = self.reference_method(method)
        grid = self.config.bandwidth_grid
        scores = [self.mise(ref, alpha, h) for h in grid]
        return grid[int(np.argmin(scores))]

    def optimal_mise(self, method: str, alpha: float, per_volume: bool = False) -> float:
        return self.mise(method, alpha, self.optimal_h(method, alpha), per_volume)

    def mise_table(self, per_volume: bool = False) -> dict:
        return {m: {str(a): self.optimal_mise(m, a, per_volume)
                    for a in self.config.alpha_levels}
                for m in self.config.methods}

    def diff(self, alpha: float, bf: str = "BF", sbf: str | None = None):
        """Paired DIFF mean and S.E. of ISE(BF) - ISE(SBF) at their optimal bandwidths."""
        sbf = sbf or self.reference_method("SBF_grid")
        a = self.ise_values(bf, alpha, self.optimal_h(bf, alpha))
        b = self.ise_values(sbf, alpha, self.optimal_h(sbf, alpha))
        return diff_se(a, b)

    def mean_sup_distance(self, method: str, alpha: float, h: float | None = None) -> float:
        h = self.optimal_h(method, alpha) if h is None else h
        return float(np.mean(self.sup_distances[method, alpha, h]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["method", "alpha", "h", "rep", "ise"])
            for method, alpha, h, rep, value in self.records:
                writer.writerow([method, repr(float(alpha)), repr(float(h)), rep,
                                 repr(float(value))])

    def summary(self) -> dict:
        cfg = self.config
        out = {
            "n": cfg.n,
            "design": "correlated" if cfg.correlated else "uncorrelated",
            "replications": len(self.reps),
            "failed_replications": len(self.failures),
            "seed": cfg.seed,
            "mise": self.mise_table(),
            "mise_per_volume": self.mise_table(per_volume=True),
            "optimal_h": {m: {str(a): self.optimal_h(m, a) for a in cfg.alpha_levels}
                          for m in cfg.methods},
            "mise_by_h": {m: {str(a): {str(h): self.mise(m, a, h)
                                       for h in cfg.bandwidth_grid}
                              for a in cfg.alpha_levels}
                          for m in cfg.methods},
        }
        if "BF" in cfg.methods and self.reference_method("SBF_grid") in cfg.methods \
                and len(self.reps) >= 2:
            out["diff"] = {str(a): dict(zip(("mean", "se"), self.diff(a)))
                           for a in cfg.alpha_levels}
        if self.qq_values:
            out["qq"] = [
                {"method": k[0], "alpha": k[1], "h": k[2], "component": k[3] + 1,
                 "point": k[4], "pairs": [list(p) for p in qq_data(v)]}
                for k, v in sorted(self.qq_values.items()) if len(v) >= 3
            ]
        return out


def run_benchmark(config: BenchConfig) -> BenchReport:
    """Run every replication, each with its own generator derived from the seed."""
    reps = range(config.replications)
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_safe_replication, [config] * len(reps), reps))
    else:
        results = [_safe_replication(config, r) for r in reps]

    failures = [(r["rep"], r["error"]) for r in results if "error" in r]
    if len(failures) > MAX_FAILURE_RATE * config.replications:
        raise RuntimeError(
            f"{len(failures)} of {config.replications} replications failed; "
            f"first error: {failures[0][1]}"
        )
    records, qq, sup = [], {}, {}
    for res in sorted((r for r in results if "error" not in r), key=lambda r: r["rep"]):
        rep = res["rep"]
        records.extend((m, a, h, rep, v) for m, a, h, v in res["ise"])
        for m, a, h, j, p, v in res["qq"]:
            qq.setdefault((m, a, h, j, p), []).append(v)
        for m, a, h, v in res["sup"]:
            sup.setdefault((m, a, h), []).append(v)
    return BenchReport(config, records, qq, sup, failures)


# -- statistics ----------------------------------------------------------------

def diff_se(ise_bf, ise_sbf):
    """Mean of paired differences and sqrt(sum (D_r - mean)^2 / ((R - 1) R))."""
    a = np.asarray(ise_bf, dtype=float)
    b = np.asarray(ise_sbf, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need paired one-dimensional ISE lists")
    R = a.size
    if R < 2:
        raise ValueError("need at least two replications")
    d = a - b
    mean = float(d.mean())
    return mean, math.sqrt(float(((d - mean) ** 2).sum()) / ((R - 1) * R))


def qq_data(values) -> list:
    """Normal Q-Q pairs: Phi^-1((r - 0.5) / R) against sorted standardized values."""
    v = np.asarray(values, dtype=float).ravel()
    R = v.size
    if R < 3:
        raise ValueError("need at least three values")
    sd = v.std(ddof=1)
    if not sd > 0:
        raise ValueError("values have zero variance")
    sample = np.sort((v - v.mean()) / sd)
    theory = stats.norm.ppf((np.arange(1, R + 1) - 0.5) / R)
    return list(zip(theory.tolist(), sample.tolist()))


def qq_correlation(values) -> float:
    pairs = np.asarray(qq_data(values))
    return float(np.corrcoef(pairs[:, 0], pairs[:, 1])[0, 1])


# -- asymptotic variance --------------------------------------------------------

_GL_NODES = 64


@functools.lru_cache(maxsize=None)
def _box_mass(correlated: bool) -> float:
    """P(X in [-1, 1]^3) for the untruncated normal, by Gauss-Legendre."""
    t, w = np.polynomial.legendre.leggauss(_GL_NODES)
    pts = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3)
    ww = np.einsum("i,j,k->ijk", w, w, w).ravel()
    dens = stats.multivariate_normal(np.zeros(3), SimModel(correlated).covariance).pdf(pts)
    return float(ww @ dens)


def _marginal_integrals(xj: float, j: int, model: SimModel):
    """(f_{X_j}(x_j), int f_X(x) / s(x) dx_{-j}) by 2-d Gauss-Legendre."""
    t, w = np.polynomial.legendre.leggauss(_GL_NODES)
    a, b = np.meshgrid(t, t, indexing="ij")
    pts = np.empty(a.shape + (3,))
    others = [l for l in range(3) if l != j]
    pts[..., j] = xj
    pts[..., others[0]] = a
    pts[..., others[1]] = b
    dens = stats.multivariate_normal(np.zeros(3), model.covariance).pdf(pts)
    dens = dens / _box_mass(model.correlated)
    ww = np.outer(w, w)
    return float((ww * dens).sum()), float((ww * dens / model.scale(pts)).sum())


def asymptotic_variance(xj: float, j: int, alpha: float, n: int, h: float,
                        model: SimModel | None = None) -> float:
    """alpha (1 - alpha) f_{X_j}(x_j) int K^2 / (f_{eps,X_j}(0, x_j)^2 n h).

    ``j`` counts components from 0.  Only interior points, at least one
    bandwidth away from both ends of [-1, 1], are accepted.
    """
    model = model or SimModel()
    lo, hi = SUPPORT[j]
    if xj - lo < h or hi - xj < h:
        raise ValueError("asymptotic variance is only defined for interior points")
    fx, inv_scale = _marginal_integrals(float(xj), j, model)
    f_joint = stats.norm.pdf(stats.norm.ppf(alpha)) * inv_scale
    return alpha * (1 - alpha) * fx * EPANECHNIKOV_ROUGHNESS / (f_joint ** 2 * n * h)
