import csv

import numpy as np
import pytest
from scipy import integrate, stats

from aqr.backfit import AdditiveFit, normalize_fit
from aqr.simulation import (
    BenchConfig,
    SimModel,
    asymptotic_variance,
    centering_constants,
    diff_se,
    gen_covariates,
    gen_response,
    ise,
    oracle_weights,
    pseudo_responses,
    qq_correlation,
    qq_data,
    replication_rng,
    run_benchmark,
    true_components,
)
from aqr import simulation

MODEL = SimModel()
BOX = stats.norm.cdf(1) - stats.norm.cdf(-1)


def truncated_mean(fn):
    """E fn(X) for X ~ N(0, 1) truncated to [-1, 1], by quadrature."""
    return integrate.quad(lambda t: fn(t) * stats.norm.pdf(t), -1, 1)[0] / BOX


@pytest.fixture(scope="module")
def big_sample():
    return gen_covariates(10 ** 6, False, np.random.default_rng(123))


class TestCovariates:
    def test_inside_support_and_reproducible(self):
        a = gen_covariates(500, True, np.random.default_rng(1))
        b = gen_covariates(500, True, np.random.default_rng(1))
        assert a.shape == (500, 3)
        assert np.all(np.abs(a) < 1)
        np.testing.assert_array_equal(a, b)

    def test_correlated_design(self):
        x = gen_covariates(10 ** 6, True, np.random.default_rng(2))
        c = np.corrcoef(x.T)
        off = c[np.triu_indices(3, 1)]
        assert np.all(np.abs(off - 0.644) <= 0.01)

    def test_uncorrelated_design(self, big_sample):
        c = np.corrcoef(big_sample.T)
        assert np.all(np.abs(c[np.triu_indices(3, 1)]) <= 0.01)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            gen_covariates(0, False, np.random.default_rng(0))


class TestResponse:
    def test_zero_noise(self):
        x = gen_covariates(20, False, np.random.default_rng(3))
        y, u = gen_response(x, None, MODEL, u=np.zeros(20))
        np.testing.assert_allclose(y, x[:, 0] ** 3 + np.sin(np.pi * x[:, 1])
                                   + 2 * np.exp(-16 * x[:, 2] ** 2), rtol=0, atol=1e-15)

    def test_origin(self):
        y, _ = gen_response(np.zeros((1, 3)), None, MODEL, u=[1.0])
        assert y[0] == pytest.approx(5.0, abs=1e-15)

    def test_sample_mean(self, big_sample):
        y, _ = gen_response(big_sample, np.random.default_rng(4), MODEL)
        expected = truncated_mean(lambda t: 2 * np.exp(-16 * t * t))
        se = y.std() / np.sqrt(y.size)
        assert abs(y.mean() - expected) < 3 * se


class TestTruth:
    def test_centering_matches_quadrature(self):
        q = stats.norm.ppf(0.3)
        c = centering_constants(0.3, MODEL)
        oracle = -np.array([
            truncated_mean(lambda t: t ** 3 + np.cos(t) * q),
            truncated_mean(lambda t: np.sin(np.pi * t) + np.exp(t) * q),
            truncated_mean(lambda t: 2 * np.exp(-16 * t * t) + np.exp(t) * q),
        ])
        np.testing.assert_allclose(c, oracle, atol=3e-3)

    def test_median_components(self):
        grid = np.linspace(-1, 1, 11)
        m0, curves = true_components(0.5, MODEL, [grid] * 3)
        c = centering_constants(0.5, MODEL)
        np.testing.assert_allclose(curves[1], c[1] + np.sin(np.pi * grid), atol=1e-15)
        assert abs(c[0]) < 2e-3
        assert m0 == pytest.approx(-c.sum())

    @pytest.mark.parametrize("alpha", [0.2, 0.5, 0.8])
    def test_identity(self, alpha):
        x = np.random.default_rng(5).uniform(-1, 1, (100, 3))
        m0, curves = true_components(alpha, MODEL, list(x.T))
        total = m0 + sum(curves)
        target = MODEL.f(x).sum(axis=1) + MODEL.scale(x) * stats.norm.ppf(alpha)
        np.testing.assert_allclose(total, target, atol=1e-12)

    def test_rejects_alpha(self):
        with pytest.raises(ValueError):
            true_components(1.0, MODEL, [np.zeros(3)] * 3)


class TestOracleWeights:
    def test_origin(self):
        assert oracle_weights(np.zeros((1, 3)), 0.5)[0] == pytest.approx(0.1329807601, abs=1e-9)

    def test_inverse_scale_and_symmetry(self):
        x = np.random.default_rng(6).uniform(-1, 1, (50, 3))
        w = oracle_weights(x, 0.2)
        np.testing.assert_allclose(w, oracle_weights(x, 0.8), rtol=1e-14)
        prod = w * MODEL.scale(x)
        np.testing.assert_allclose(prod, prod[0], rtol=1e-14)

    def test_pseudo_errors(self):
        rng = np.random.default_rng(7)
        x = gen_covariates(400, False, rng)
        u = rng.standard_normal(400)
        z, w = pseudo_responses(x, u, 0.3, MODEL)
        truth = MODEL.f(x).sum(axis=1) + MODEL.scale(x) * stats.norm.ppf(0.3)
        eta = z - truth
        above = u > stats.norm.ppf(0.3)
        np.testing.assert_allclose(eta[above] * w[above], 0.3, atol=1e-12)
        np.testing.assert_allclose(eta[~above] * w[~above], -0.7, atol=1e-12)

    def test_eta_two_at_quarter_density(self):
        # alpha = 0.5, f = 0.25 and eps > 0 gives eta = 0.5 / 0.25
        s = stats.norm.pdf(0) / 0.25
        x1 = np.arccos(s - 2.0)          # cos x1 + exp 0 + exp 0 = s
        z, w = pseudo_responses(np.array([[x1, 0.0, 0.0]]), [1.0], 0.5, MODEL)
        assert w[0] == pytest.approx(0.25, rel=1e-12)
        truth = MODEL.f(np.array([[x1, 0, 0]])).sum()
        assert z[0] - truth == pytest.approx(2.0, rel=1e-12)

    def test_eta_conditional_mean(self, big_sample):
        u = np.random.default_rng(8).standard_normal(big_sample.shape[0])
        z, w = pseudo_responses(big_sample, u, 0.2, MODEL)
        eta = z - (MODEL.f(big_sample).sum(axis=1)
                   + MODEL.scale(big_sample) * stats.norm.ppf(0.2))
        v = eta * w                      # mean zero with variance alpha(1 - alpha)
        assert abs(v.mean()) < 3 * v.std() / np.sqrt(v.size)


def fit_from_curves(curves, grids, weight_curves=None):
    return AdditiveFit("BF", 0.5, (0.5,) * 3, ((-1.0, 1.0),) * 3, tuple(grids),
                       tuple(curves), 0.0, 1, True, weight_curves=weight_curves)


class TestIse:
    def test_truth_on_grid(self):
        grids = [np.linspace(-1, 1, 41)] * 3
        _, curves = true_components(0.5, MODEL, grids)
        evals = gen_covariates(5000, False, np.random.default_rng(9))
        uniform = normalize_fit(fit_from_curves(curves, grids), [np.ones(41)] * 3)
        assert ise(uniform, 0.5, MODEL, evals) < 1e-4
        assert ise(fit_from_curves(curves, grids), 0.5, MODEL, evals) < 1e-4

    def test_zero_fit(self, big_sample):
        grids = [np.linspace(-1, 1, 41)] * 3
        zero = fit_from_curves([np.zeros(41)] * 3, grids)
        evals = big_sample[:20000]
        value = ise(zero, 0.7, MODEL, evals)
        _, truth = true_components(0.7, MODEL, list(big_sample.T))
        sq = sum(truth) ** 2
        assert abs(value - sq.mean()) < 3 * sq.std() / np.sqrt(evals.shape[0])
        assert ise(zero, 0.7, MODEL, evals, per_volume=True) == pytest.approx(value / 8)

    def test_eval_size_consistency(self):
        grids = [np.linspace(-1, 1, 41)] * 3
        zero = fit_from_curves([np.zeros(41)] * 3, grids)
        rng = np.random.default_rng(10)
        a = ise(zero, 0.5, MODEL, gen_covariates(5000, False, rng))
        b = ise(zero, 0.5, MODEL, gen_covariates(10000, False, rng))
        assert abs(a - b) / a < 0.1

    def test_rejects_empty(self):
        grids = [np.linspace(-1, 1, 5)] * 3
        with pytest.raises(ValueError):
            ise(fit_from_curves([np.zeros(5)] * 3, grids), 0.5, MODEL, np.empty((0, 3)))


class TestStatistics:
    def test_diff_se(self):
        assert diff_se([1, 2, 3], [1, 2, 3]) == (0.0, 0.0)
        mean, se = diff_se([1.5, 2.5, 3.5], [1, 2, 3])
        assert mean == 0.5 and se == pytest.approx(0.0, abs=1e-15)
        a, b = np.array([0.3, 0.1, 0.4, 0.2]), np.array([0.1, 0.1, 0.1, 0.1])
        d = a - b
        mean, se = diff_se(a, b)
        assert mean == pytest.approx(d.mean())
        assert se == pytest.approx(np.sqrt(((d - d.mean()) ** 2).sum() / (3 * 4)))
        with pytest.raises(ValueError):
            diff_se([1.0], [1.0])
        with pytest.raises(ValueError):
            diff_se([1.0, 2.0], [1.0])

    def test_qq_identity(self):
        R = 50
        exact = stats.norm.ppf((np.arange(1, R + 1) - 0.5) / R)
        v = (exact - exact.mean()) / exact.std(ddof=1)
        pairs = np.array(qq_data(v))
        np.testing.assert_allclose(pairs[:, 1], np.sort(v), atol=1e-12)
        np.testing.assert_allclose(pairs[:, 0], exact, atol=1e-12)
        assert qq_correlation(exact) > 0.999

    def test_qq_affine_invariance(self):
        v = np.random.default_rng(11).standard_normal(40)
        np.testing.assert_allclose(np.array(qq_data(3 * v - 7)), np.array(qq_data(v)),
                                   atol=1e-12)

    def test_qq_rejects(self):
        with pytest.raises(ValueError):
            qq_data([1.0, 1.0, 1.0])
        with pytest.raises(ValueError):
            qq_data([1.0, 2.0])


class TestAsymptoticVariance:
    def test_kernel_roughness(self):
        value = integrate.quad(lambda t: (0.75 * (1 - t * t)) ** 2, -1, 1)[0]
        assert value == pytest.approx(0.6, abs=1e-14)

    def test_matches_independent_formula(self):
        # uncorrelated design: f_{X_2} is the truncated normal marginal and
        # f_{eps,X_2}(0, x) = phi(q) f_{X_2}(x) E[1 / s(X) | X_2 = x]
        x, alpha, n, h = 0.2, 0.3, 200, 0.5
        fx = stats.norm.pdf(x) / BOX
        inner = integrate.dblquad(
            lambda b, a: stats.norm.pdf(a) * stats.norm.pdf(b) / BOX ** 2
            / (np.cos(a) + np.exp(x) + np.exp(b)), -1, 1, -1, 1)[0]
        f_joint = stats.norm.pdf(stats.norm.ppf(alpha)) * fx * inner
        expected = alpha * (1 - alpha) * fx * 0.6 / (f_joint ** 2 * n * h)
        assert asymptotic_variance(x, 1, alpha, n, h) == pytest.approx(expected, rel=1e-8)

    def test_alpha_symmetry_and_order(self):
        v = [asymptotic_variance(0.0, 1, a, 200, 0.5) for a in (0.2, 0.5, 0.8)]
        assert v[0] == pytest.approx(v[2], rel=1e-12)
        assert v[1] < v[0]

    def test_rejects_boundary(self):
        with pytest.raises(ValueError):
            asymptotic_variance(0.7, 1, 0.5, 200, 0.5)


SMALL = dict(n=60, alpha_levels=(0.5,), replications=3, bandwidth_grid=(0.5, 0.7),
             eval_points=300, seed=17)


@pytest.fixture(scope="module")
def small_report():
    return run_benchmark(BenchConfig(**SMALL, qq_targets=((1, 0.0),)))


class TestBenchmark:
    def test_config_validation(self):
        for bad in (dict(replications=0), dict(bandwidth_grid=(0.0,)),
                    dict(alpha_levels=(1.0,)), dict(methods=("LL",)), dict(n=1)):
            with pytest.raises(ValueError):
                BenchConfig(**{"n": 50, **bad})

    def test_record_count(self, small_report):
        cfg = small_report.config
        assert len(small_report.records) == len(cfg.methods) * 1 * 2 * 3
        assert all(r[4] >= 0 for r in small_report.records)

    def test_mise_is_mean(self, small_report):
        vals = small_report.ise_values("BF", 0.5, 0.5)
        assert small_report.mise("BF", 0.5, 0.5) == float(np.mean(vals))

    def test_single_replication(self):
        rep = run_benchmark(BenchConfig(**{**SMALL, "replications": 1}))
        assert rep.mise("SBF_grid", 0.5, 0.7) == rep.ise_values("SBF_grid", 0.5, 0.7)[0]

    def test_replication_independence(self, small_report):
        two = run_benchmark(BenchConfig(**{**SMALL, "replications": 2},
                                        qq_targets=((1, 0.0),)))
        assert two.records == [r for r in small_report.records if r[3] < 2]
        sub = small_report.subset(range(2))
        assert sub.records == two.records
        assert sub.qq_values == two.qq_values
        assert sub.sup_distances == two.sup_distances

    def test_deterministic_and_parallel(self, small_report):
        again = run_benchmark(BenchConfig(**SMALL, qq_targets=((1, 0.0),), jobs=2))
        assert again.records == small_report.records
        assert again.qq_values == small_report.qq_values

    def test_optimal_bandwidth_rules(self, small_report):
        h_bf = small_report.optimal_h("BF", 0.5)
        assert small_report.optimal_h("BF_star", 0.5) == h_bf
        assert small_report.optimal_h("SBF_star", 0.5) == small_report.optimal_h("SBF_grid", 0.5)
        assert small_report.mise("BF", 0.5, h_bf) == min(
            small_report.mise("BF", 0.5, h) for h in (0.5, 0.7))

    def test_summary_and_csv(self, small_report, tmp_path):
        summary = small_report.summary()
        assert set(summary["mise"]) == {"BF", "SBF_grid", "BF_star", "SBF_star"}
        assert summary["diff"]["0.5"]["se"] >= 0
        assert summary["qq"][0]["component"] == 2
        path = tmp_path / "ise.csv"
        small_report.write_csv(path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "alpha", "h", "rep", "ise"]
        assert [float(r[4]) for r in rows[1:]] == [r[4] for r in small_report.records]

    def test_failure_cap(self, monkeypatch):
        real = simulation._run_replication

        def flaky(config, rep):
            if rep == 0:
                raise ValueError("synthetic failure")
            return real(config, rep)

        monkeypatch.setattr(simulation, "_run_replication", flaky)
        with pytest.raises(RuntimeError, match="failed"):
            run_benchmark(BenchConfig(**{**SMALL, "methods": ("BF",)}))
        cfg = BenchConfig(**{**SMALL, "methods": ("BF",), "replications": 21,
                             "bandwidth_grid": (0.7,)})
        report = run_benchmark(cfg)
        assert report.failures == [(0, "synthetic failure")]
        assert report.reps == list(range(1, 21))

    def test_replication_streams_differ(self):
        a = replication_rng(5, 0).standard_normal(3)
        b = replication_rng(5, 1).standard_normal(3)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, replication_rng(5, 0).standard_normal(3))
