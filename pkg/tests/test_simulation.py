"""
Tests for the synthetic regression studies.

Covers:
1. AR(1) generation and the data-generating processes
2. Analytic limits of n Var(beta_hat_1) and their Monte Carlo check
3. The study harness: determinism across worker counts, identities between
   methods, optimal-lambda tables and the CSV output
4. Reduced-scale reproduction of the published comparisons (slow)
"""

import math
import os
import sys

import numpy as np
import pandas as pd
import pytest
from scipy.linalg import toeplitz

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from covariance import BootstrapConfig, ShrinkageParams, default_shrink_grid
from errors import InvalidParameter, UnsupportedConfig
from estimators import GaussianPrior, normal_tworeg_fit, ols_fit
from rng import substream
from simulation import (
    CSV_COLUMNS,
    LIFETIME_10,
    LIFETIME_100,
    DgpConfig,
    Method,
    Study,
    _ar_correlation_apply,
    analytic_limit,
    empirical_nvar,
    format_study_table,
    gen_ar1,
    gen_dataset,
    optimal_results,
    run_study,
    study_frame,
    write_study_csv,
)

SMALL_LAMBDAS = [0.0, 1.0, 10.0]
SMALL_SHRINK = [ShrinkageParams(0.0, 0.0), ShrinkageParams(1.0, 0.0)]


def _small_study(workers=1, methods=tuple(Method), seed=5):
    cfg = DgpConfig.for_study(Study.AUTOCORRELATION, n=200, p=3, seed=seed)
    return run_study(
        cfg,
        list(methods),
        SMALL_LAMBDAS,
        SMALL_SHRINK,
        replicates=4,
        bootstrap=BootstrapConfig(20, 5, 0),
        workers=workers,
    )


def _by_cell(results):
    return {(r.method, r.lam, r.kappa, r.mu): r for r in results}


class TestAr1:
    """Stationary AR(1) generator"""

    def test_moments(self):
        series = gen_ar1(200_000, 0.5, 4.0, substream(1, 0))
        assert np.var(series) == pytest.approx(4.0, rel=0.05)
        lag1 = np.corrcoef(series[:-1], series[1:])[0, 1]
        assert lag1 == pytest.approx(0.5, abs=0.01)

    def test_autocorrelation_decays_geometrically(self):
        series = gen_ar1(200_000, LIFETIME_10, 1.0, substream(3, 0))
        for k in range(1, 6):
            lagged = np.corrcoef(series[:-k], series[k:])[0, 1]
            assert lagged == pytest.approx(LIFETIME_10 ** k, abs=0.03)

    def test_zero_coefficient_is_white_noise(self):
        series = gen_ar1(100_000, 0.0, 1.0, substream(2, 0))
        assert abs(np.corrcoef(series[:-1], series[1:])[0, 1]) < 0.02

    def test_same_substream_same_series(self):
        a = gen_ar1(50, LIFETIME_10, 1.0, substream(9, 3))
        b = gen_ar1(50, LIFETIME_10, 1.0, substream(9, 3))
        np.testing.assert_array_equal(a, b)

    def test_coefficient_range(self):
        with pytest.raises(InvalidParameter):
            gen_ar1(10, 1.0, 1.0, substream(0))
        with pytest.raises(InvalidParameter):
            gen_ar1(10, 0.5, 0.0, substream(0))

    def test_correlation_apply_matches_dense_matrix(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal((50, 3))
        dense = toeplitz(0.8 ** np.arange(50))
        np.testing.assert_allclose(_ar_correlation_apply(0.8, v), dense @ v, rtol=1e-10, atol=1e-12)
        np.testing.assert_array_equal(_ar_correlation_apply(0.0, v), v)


class TestDgpConfig:
    """Configuration validation and study presets"""

    def test_presets(self):
        cfg = DgpConfig.for_study(Study.AUTOCORRELATION)
        assert cfg.pi == pytest.approx(math.exp(-0.1))
        assert cfg.sigma2 == 10.0
        cfg = DgpConfig.for_study(Study.RANDOM_EFFECT_ALIGNED, sigma2=None)
        assert cfg.tau == pytest.approx(LIFETIME_100)
        assert cfg.effect_var == 5.0
        assert cfg.sigma2 == 0.5

    def test_invalid_values(self):
        with pytest.raises(InvalidParameter):
            DgpConfig(rho=1.0)
        with pytest.raises(InvalidParameter):
            DgpConfig(sigma2=0.0)
        with pytest.raises(InvalidParameter):
            DgpConfig(n=5, p=10)

    def test_noise_variance_scales_with_p(self):
        assert DgpConfig(p=10, sigma2=2.0).noise_var == 20.0


class TestGenDataset:
    """Synthetic datasets and their exact conditional covariance"""

    def test_shapes_and_determinism(self):
        cfg = DgpConfig(n=100, p=4, seed=3)
        a = gen_dataset(cfg)
        b = gen_dataset(cfg)
        assert a.dataset.design.shape == (100, 4)
        assert a.true_beta.shape == (4,)
        np.testing.assert_array_equal(a.dataset.response, b.dataset.response)

    def test_iid_noise_gives_classical_covariance(self):
        cfg = DgpConfig(n=100, p=3, sigma2=2.0)
        sample = gen_dataset(cfg)
        expected = cfg.noise_var * np.linalg.inv(sample.dataset.gram)
        np.testing.assert_allclose(sample.true_cov.entries, expected, rtol=1e-10)

    def test_unaligned_effect_adds_to_noise_variance(self):
        cfg = DgpConfig(n=100, p=3, sigma2=1.0, tau=0.5, effect_var=2.0, study=Study.RANDOM_EFFECT_UNALIGNED)
        sample = gen_dataset(cfg)
        expected = (cfg.noise_var + 2.0) * np.linalg.inv(sample.dataset.gram)
        np.testing.assert_allclose(sample.true_cov.entries, expected, rtol=1e-10)

    def test_aligned_effect_inflates_first_coefficient(self):
        base = DgpConfig(n=400, p=3, sigma2=1.0, seed=8, study=Study.RANDOM_EFFECT_ALIGNED)
        plain = gen_dataset(base).true_cov.entries
        inflated = gen_dataset(DgpConfig(n=400, p=3, sigma2=1.0, tau=0.9, effect_var=3.0, seed=8,
                                         study=Study.RANDOM_EFFECT_ALIGNED)).true_cov.entries
        assert inflated[0, 0] > plain[0, 0]

    def test_without_true_covariance(self):
        assert gen_dataset(DgpConfig(n=50, p=2), with_true_cov=False).true_cov is None


class TestAnalyticLimit:
    """Closed-form limits of n Var(beta_hat_1)"""

    def test_autocorrelation(self):
        cfg = DgpConfig(p=1, sigma2=1.0, pi=LIFETIME_10, rho=LIFETIME_10)
        assert analytic_limit(cfg) == pytest.approx(10.033, abs=1e-3)

    def test_covariate_and_noise_coefficients_are_interchangeable(self):
        for p in (1, 4):
            a = DgpConfig(p=p, sigma2=1.0, pi=0.9, rho=0.3)
            b = DgpConfig(p=p, sigma2=1.0, pi=0.3, rho=0.9)
            assert analytic_limit(a) == pytest.approx(analytic_limit(b), rel=1e-12)

    def test_independent_noise_is_noise_variance(self):
        assert analytic_limit(DgpConfig(p=1, sigma2=3.0, pi=0.9)) == pytest.approx(3.0)

    def test_aligned_random_effect(self):
        cfg = DgpConfig(p=1, sigma2=1.0, tau=0.5, effect_var=1.0, study=Study.RANDOM_EFFECT_ALIGNED)
        assert analytic_limit(cfg) == pytest.approx(6.0)

    def test_unaligned_random_effect_ignores_tau(self):
        for tau in (0.0, 0.5, 0.99):
            cfg = DgpConfig(p=1, sigma2=1.0, tau=tau, effect_var=2.0, study=Study.RANDOM_EFFECT_UNALIGNED)
            assert analytic_limit(cfg) == pytest.approx(3.0)

    def test_aligned_needs_independent_covariates(self):
        cfg = DgpConfig(p=1, pi=0.5, tau=0.5, effect_var=1.0, study=Study.RANDOM_EFFECT_ALIGNED)
        with pytest.raises(UnsupportedConfig):
            analytic_limit(cfg)


class TestEmpiricalNvar:
    """Monte Carlo n Var(beta_hat_1)"""

    def test_worker_invariant(self):
        cfg = DgpConfig(n=100, p=1, sigma2=1.0, pi=0.5, rho=0.5, seed=4)
        serial = empirical_nvar(cfg, [100, 200], replicates=20, workers=1)
        threaded = empirical_nvar(cfg, [100, 200], replicates=20, workers=3)
        assert serial == threaded
        assert [e.n for e in serial] == [100, 200]

    def test_needs_two_replicates(self):
        with pytest.raises(InvalidParameter):
            empirical_nvar(DgpConfig(n=50, p=1), [50], replicates=1)

    @pytest.mark.slow
    @pytest.mark.parametrize(
        "cfg",
        [
            DgpConfig(p=1, sigma2=1.0, pi=LIFETIME_10, rho=LIFETIME_10, seed=1),
            DgpConfig(p=1, sigma2=1.0, tau=0.5, effect_var=1.0, study=Study.RANDOM_EFFECT_ALIGNED, seed=2),
            DgpConfig(p=1, sigma2=1.0, tau=0.5, effect_var=1.0, study=Study.RANDOM_EFFECT_UNALIGNED, seed=3),
        ],
        ids=["autocorrelation", "aligned", "unaligned"],
    )
    def test_matches_analytic_limit(self, cfg):
        limit = analytic_limit(cfg)
        (estimate,) = empirical_nvar(cfg, [8000], replicates=2000, workers=4)
        assert abs(estimate.nvar - limit) <= 0.05 * limit + 3 * estimate.std_error

    @pytest.mark.slow
    def test_swapping_covariate_and_noise_coefficients(self):
        a = DgpConfig(p=1, sigma2=1.0, pi=0.9, rho=0.5, seed=21)
        b = DgpConfig(p=1, sigma2=1.0, pi=0.5, rho=0.9, seed=22)
        (ea,) = empirical_nvar(a, [4000], replicates=2000, workers=4)
        (eb,) = empirical_nvar(b, [4000], replicates=2000, workers=4)
        assert abs(ea.nvar - eb.nvar) <= 3 * math.hypot(ea.std_error, eb.std_error) + 0.02 * analytic_limit(a)

    @pytest.mark.slow
    def test_unaligned_effect_persistence_does_not_matter(self):
        estimates = []
        for tau, seed in ((0.0, 23), (0.9, 24)):
            cfg = DgpConfig(p=1, sigma2=1.0, tau=tau, effect_var=2.0,
                            study=Study.RANDOM_EFFECT_UNALIGNED, seed=seed)
            (estimate,) = empirical_nvar(cfg, [4000], replicates=2000, workers=4)
            estimates.append(estimate)
        low, high = estimates
        assert abs(low.nvar - high.nvar) <= 3 * math.hypot(low.std_error, high.std_error)


class TestRunStudy:
    """The study harness on a tiny configuration"""

    def test_one_row_per_cell(self):
        results = _small_study()
        # OLS once, standard and correct per lambda, 2REG per lambda and shrink point
        assert len(results) == 1 + 3 + 2 * 3 + 3
        assert all(r.replicates == 4 for r in results)

    def test_worker_count_does_not_change_results(self, tmp_path):
        serial_path = tmp_path / "serial.csv"
        threaded_path = tmp_path / "threaded.csv"
        write_study_csv(_small_study(workers=1), str(serial_path))
        write_study_csv(_small_study(workers=3), str(threaded_path))
        assert serial_path.read_bytes() == threaded_path.read_bytes()

    def test_zero_lambda_is_ols_for_every_method(self):
        cells = _by_cell(_small_study())
        ols = cells[(Method.OLS, 0.0, None, None)].mean_sq_error
        assert cells[(Method.STANDARD_RIDGE, 0.0, None, None)].mean_sq_error == pytest.approx(ols, rel=1e-12)
        assert cells[(Method.CORRECT_TWOREG_RIDGE, 0.0, None, None)].mean_sq_error == pytest.approx(ols, rel=1e-12)
        assert cells[(Method.TWOREG_RIDGE, 0.0, 0.0, 0.0)].mean_sq_error == pytest.approx(ols, rel=1e-12)

    def test_full_shrinkage_is_standard_ridge(self):
        cells = _by_cell(_small_study())
        for lam in SMALL_LAMBDAS:
            tworeg = cells[(Method.TWOREG_RIDGE, lam, 1.0, 0.0)]
            standard = cells[(Method.STANDARD_RIDGE, lam, None, None)]
            assert tworeg.mean_sq_error == pytest.approx(standard.mean_sq_error, rel=1e-8)

    def test_validation(self):
        cfg = DgpConfig(n=50, p=2)
        with pytest.raises(InvalidParameter):
            run_study(cfg, [Method.OLS], [0.0], SMALL_SHRINK, 1, BootstrapConfig(20, 5, 0))
        with pytest.raises(InvalidParameter):
            run_study(cfg, [Method.STANDARD_RIDGE], [-1.0], SMALL_SHRINK, 3, BootstrapConfig(20, 5, 0))
        with pytest.raises(InvalidParameter):
            run_study(cfg, [Method.TWOREG_RIDGE], [1.0], [], 3, BootstrapConfig(20, 5, 0))

    def test_hac_crude_estimator(self):
        cfg = DgpConfig.for_study(Study.AUTOCORRELATION, n=200, p=3, seed=1)
        results = run_study(
            cfg, [Method.TWOREG_RIDGE], [0.0, 1.0], [ShrinkageParams(0.0, 0.0)], 3,
            BootstrapConfig(20, 5, 0), crude_estimator="hac",
        )
        assert len(results) == 2


class TestStudyOutputs:
    """Optimal-lambda selection, tables and CSV"""

    def test_optimal_results_minimize_error(self):
        results = _small_study()
        best = optimal_results(results)
        for r in best:
            same_arm = [x for x in results if (x.method, x.kappa, x.mu) == (r.method, r.kappa, r.mu)]
            assert r.mean_sq_error == min(x.mean_sq_error for x in same_arm)
        assert len(best) == 1 + 1 + 2 + 1

    def test_table_layout(self):
        table = format_study_table(_small_study(), "error")
        assert "OLS" in table
        assert "standard ridge" in table
        assert "correctly specified 2REG ridge" in table
        assert "mu=0 kappa=1" in table
        assert "N/R" in table

    def test_beta1_table(self):
        assert "lambda=" in format_study_table(_small_study(), "beta1")
        with pytest.raises(InvalidParameter):
            format_study_table(_small_study(), "variance")

    def test_csv_columns(self, tmp_path):
        path = tmp_path / "results.csv"
        write_study_csv(_small_study(), str(path))
        frame = pd.read_csv(path)
        assert list(frame.columns) == CSV_COLUMNS
        assert set(frame["method"]) == {m.value for m in Method}
        assert len(frame) == len(study_frame(_small_study()))


class TestConsistency:
    """Normal 2REG with the exact covariance is consistent"""

    @pytest.mark.slow
    def test_median_error_decreases_with_n(self):
        medians = []
        for n in (500, 2000, 8000):
            cfg = DgpConfig.for_study(Study.AUTOCORRELATION, n=n, seed=11)
            errors = []
            for r in range(200):
                sample = gen_dataset(cfg, substream(cfg.seed, 0, n, r))
                fit = normal_tworeg_fit(ols_fit(sample.dataset), sample.true_cov, GaussianPrior(1.0))
                errors.append(np.sum((fit.values - sample.true_beta) ** 2))
            medians.append(np.median(errors))
        assert medians[0] > medians[1] > medians[2]

    @pytest.mark.slow
    def test_exact_covariance_beats_ols_at_the_best_lambda(self):
        cfg = DgpConfig.for_study(Study.AUTOCORRELATION, seed=12)
        results = run_study(
            cfg,
            [Method.OLS, Method.CORRECT_TWOREG_RIDGE],
            [0.0] + list(np.logspace(-2, 4, 31)),
            [ShrinkageParams(0.0, 0.0)],
            500,
            BootstrapConfig(20, 5, cfg.seed),
            workers=4,
        )
        best = {r.method: r for r in optimal_results(results)}
        ols, correct = best[Method.OLS], best[Method.CORRECT_TWOREG_RIDGE]
        gap = ols.mean_sq_error - correct.mean_sq_error
        assert gap > 3 * math.hypot(ols.std_error, correct.std_error)


@pytest.mark.slow
class TestPublishedComparisons:
    """Reduced-scale versions of the simulation tables"""

    def _run(self, cfg, replicates=2000):
        results = run_study(
            cfg,
            list(Method),
            [0.0] + list(np.logspace(-2, 4, 61)),
            [ShrinkageParams(0.0, 0.0)],
            replicates,
            BootstrapConfig(500, 20, cfg.seed),
            workers=4,
        )
        return {r.method: r for r in optimal_results(results)}

    def _check(self, best, expected):
        for method, mean in expected.items():
            r = best[method]
            assert abs(r.mean_sq_error - mean) <= 4 * r.std_error
        ols, standard, tworeg, correct = (best[m].mean_sq_error for m in Method)
        assert ols > standard > tworeg > correct

    def test_autocorrelation_low_signal(self):
        best = self._run(DgpConfig.for_study(Study.AUTOCORRELATION, sigma2=10.0, seed=7))
        self._check(best, {Method.OLS: 0.953, Method.STANDARD_RIDGE: 0.869,
                           Method.TWOREG_RIDGE: 0.784, Method.CORRECT_TWOREG_RIDGE: 0.760})
        standard, tworeg = best[Method.STANDARD_RIDGE], best[Method.TWOREG_RIDGE]
        gap = standard.mean_beta1_sq - tworeg.mean_beta1_sq
        assert gap > 3 * math.hypot(standard.beta1_std_error, tworeg.beta1_std_error)

    def test_autocorrelation_high_signal(self):
        best = self._run(DgpConfig.for_study(Study.AUTOCORRELATION, sigma2=2.0, seed=8))
        self._check(best, {Method.OLS: 0.1907, Method.STANDARD_RIDGE: 0.1871,
                           Method.TWOREG_RIDGE: 0.1821, Method.CORRECT_TWOREG_RIDGE: 0.1805})

    def test_random_effect(self):
        best = self._run(DgpConfig.for_study(Study.RANDOM_EFFECT_ALIGNED, seed=9))
        self._check(best, {Method.OLS: 0.506, Method.STANDARD_RIDGE: 0.483,
                           Method.TWOREG_RIDGE: 0.367, Method.CORRECT_TWOREG_RIDGE: 0.362})
