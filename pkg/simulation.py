"""
Synthetic regression studies under contemporaneous exogeneity.

Three data-generating shapes:

- autocorrelation: covariate 1 and the noise are stationary AR(1) series
- random_effect_aligned: the noise gains X_1 * b with b an AR(1) random effect
- random_effect_unaligned: the noise gains Z * b with Z independent of X

run_study compares OLS, standard ridge, 2REG ridge (bootstrap covariance,
shrunk and normalized) and correctly specified 2REG ridge (exact conditional
covariance) by squared estimation error over many replicates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal import lfilter

import metrics
from covariance import (
    BootstrapConfig,
    CrudeEstimator,
    FoldPlan,
    ShrinkageParams,
    estimate_crude,
    normalize,
    prior_cov,
    shrink,
)
from errors import InvalidParameter, UnsupportedConfig
from estimators import (
    CovarianceMatrix,
    CovarianceStage,
    Dataset,
    ols_fit,
    ridge_path,
    solve_normal_equations,
)
from rng import STAGE_BOOTSTRAP, STAGE_DATA, derive_seed, parallel_map, substream

logger = logging.getLogger(__name__)

# Autoregressive coefficient with mean lifetime L is exp(-1/L)
LIFETIME_10 = math.exp(-1.0 / 10.0)
LIFETIME_100 = math.exp(-1.0 / 100.0)

GAUSSIAN_FOURTH_MOMENT = 3.0


class Study(str, Enum):
    AUTOCORRELATION = "autocorrelation"
    RANDOM_EFFECT_ALIGNED = "random_effect_aligned"
    RANDOM_EFFECT_UNALIGNED = "random_effect_unaligned"


class Method(str, Enum):
    OLS = "ols"
    STANDARD_RIDGE = "standard_ridge"
    TWOREG_RIDGE = "tworeg_ridge"
    CORRECT_TWOREG_RIDGE = "correct_tworeg_ridge"


METHOD_LABELS = {
    Method.OLS: "OLS",
    Method.STANDARD_RIDGE: "standard ridge",
    Method.TWOREG_RIDGE: "2REG ridge",
    Method.CORRECT_TWOREG_RIDGE: "correctly specified 2REG ridge",
}


@dataclass(frozen=True)
class DgpConfig:
    n: int = 2000
    p: int = 10
    pi: float = 0.0
    rho: float = 0.0
    tau: float = 0.0
    sigma2: float = 1.0
    effect_var: float = 0.0
    study: Study = Study.AUTOCORRELATION
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "study", Study(self.study))
        for name in ("pi", "rho", "tau"):
            value = getattr(self, name)
            if not (0.0 <= value < 1.0):
                raise InvalidParameter(f"{name} must lie in [0, 1), got {value}")
        if not self.sigma2 > 0.0:
            raise InvalidParameter(f"sigma2 must be positive, got {self.sigma2}")
        if self.effect_var < 0.0:
            raise InvalidParameter(f"effect_var must be >= 0, got {self.effect_var}")
        if self.p < 1 or self.n < self.p:
            raise InvalidParameter(f"need n >= p >= 1, got n={self.n}, p={self.p}")
        if not (0 <= self.seed < 2**64):
            raise InvalidParameter(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def noise_var(self) -> float:
        """Var(eps_i) = sigma2 * p"""
        return self.sigma2 * self.p

    @classmethod
    def for_study(cls, study: Study, **overrides) -> "DgpConfig":
        """Defaults of the published studies, overridable per field."""
        study = Study(study)
        if study == Study.AUTOCORRELATION:
            base = dict(pi=LIFETIME_10, rho=LIFETIME_10, sigma2=10.0)
        else:
            base = dict(tau=LIFETIME_100, effect_var=5.0, sigma2=0.5)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(study=study, **base)


class SyntheticSample(NamedTuple):
    dataset: Dataset
    true_beta: np.ndarray
    true_cov: Optional[CovarianceMatrix]


@dataclass(frozen=True)
class StudyResult:
    method: Method
    lam: float
    kappa: Optional[float]
    mu: Optional[float]
    mean_sq_error: float
    std_error: float
    mean_beta1_sq: float
    replicates: int
    mean_beta_sq_total: float = float("nan")
    beta1_std_error: float = float("nan")


class NvarEstimate(NamedTuple):
    n: int
    nvar: float
    std_error: float


def gen_ar1(length: int, coeff: float, marginal_var: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary Gaussian AR(1) with covariance marginal_var * coeff^|i-j|.

    x_0 ~ N(0, v); x_i = coeff x_{i-1} + sqrt(1 - coeff^2) sqrt(v) z_i.
    """
    if not (0.0 <= coeff < 1.0):
        raise InvalidParameter(f"AR coefficient must lie in [0, 1), got {coeff}")
    if not marginal_var > 0.0:
        raise InvalidParameter(f"marginal variance must be positive, got {marginal_var}")

    scale = math.sqrt(marginal_var)
    innovations = rng.standard_normal(length) * (scale * math.sqrt(1.0 - coeff * coeff))
    if length:
        innovations[0] /= math.sqrt(1.0 - coeff * coeff)
    if coeff == 0.0:
        return innovations
    return lfilter([1.0], [1.0, -coeff], innovations)


def _ar_correlation_apply(coeff: float, v: np.ndarray) -> np.ndarray:
    """T v with T_ij = coeff^|i-j|, along axis 0, without forming T."""
    if coeff == 0.0:
        return v.copy()
    forward = lfilter([1.0], [1.0, -coeff], v, axis=0)
    backward = lfilter([1.0], [1.0, -coeff], v[::-1], axis=0)[::-1]
    return forward + backward - v


def gen_dataset(
    cfg: DgpConfig,
    rng: Optional[np.random.Generator] = None,
    with_true_cov: bool = True,
) -> SyntheticSample:
    """One synthetic dataset, its true coefficients and the exact Cov(beta_OLS | X).

    The conditional covariance is (X^T X)^-1 X^T Sigma X (X^T X)^-1 with Sigma
    the noise covariance given X.
    """
    rng = rng if rng is not None else substream(cfg.seed, STAGE_DATA)
    n, p = cfg.n, cfg.p

    design = np.empty((n, p))
    design[:, 0] = gen_ar1(n, cfg.pi, 1.0, rng)
    if p > 1:
        design[:, 1:] = rng.standard_normal((n, p - 1))
    beta = rng.standard_normal(p)
    noise = gen_ar1(n, cfg.rho, cfg.noise_var, rng)

    effect_carrier = None
    if cfg.study != Study.AUTOCORRELATION and cfg.effect_var > 0.0:
        effect = gen_ar1(n, cfg.tau, cfg.effect_var, rng)
        if cfg.study == Study.RANDOM_EFFECT_ALIGNED:
            effect_carrier = design[:, 0]
        else:
            effect_carrier = rng.standard_normal(n)
        noise = noise + effect_carrier * effect

    response = design @ beta + noise
    dataset = Dataset(design, response)

    true_cov = None
    if with_true_cov:
        # X^T Sigma X term by term
        meat = cfg.noise_var * (design.T @ _ar_correlation_apply(cfg.rho, design))
        if cfg.study == Study.RANDOM_EFFECT_ALIGNED and effect_carrier is not None:
            scaled = design * effect_carrier[:, None]
            meat = meat + cfg.effect_var * (scaled.T @ _ar_correlation_apply(cfg.tau, scaled))
        elif cfg.study == Study.RANDOM_EFFECT_UNALIGNED and effect_carrier is not None:
            # Z is independent of X with unit variance, so given X its term is diagonal
            meat = meat + cfg.effect_var * dataset.gram
        meat = (meat + meat.T) / 2.0
        gram_inv = solve_normal_equations(dataset.gram, np.eye(p), "gen_dataset")
        true_cov = CovarianceMatrix(gram_inv @ meat @ gram_inv, CovarianceStage.TRUE_KNOWN)

    return SyntheticSample(dataset, beta, true_cov)


def analytic_limit(cfg: DgpConfig, fourth_moment: float = GAUSSIAN_FOURTH_MOMENT) -> float:
    """Limit of n Var(beta_hat_1) for covariate 1, with unit-variance covariates.

    autocorrelation:          s2 (1 + pi rho) / (1 - pi rho)
    random_effect_aligned:    s2 + Var(b) (E[X^4] + 2 tau / (1 - tau))
    random_effect_unaligned:  s2 + Var(b)
    where s2 = sigma2 * p is the noise variance.
    """
    s2 = cfg.noise_var
    if cfg.study == Study.AUTOCORRELATION:
        product = cfg.pi * cfg.rho
        return s2 * (1.0 + product) / (1.0 - product)
    if cfg.study == Study.RANDOM_EFFECT_ALIGNED:
        if cfg.pi != 0.0 or cfg.rho != 0.0:
            raise UnsupportedConfig(
                "aligned random-effect limit needs i.i.d. covariates and noise (pi = rho = 0)"
            )
        return s2 + cfg.effect_var * (fourth_moment + 2.0 * cfg.tau / (1.0 - cfg.tau))
    if cfg.study == Study.RANDOM_EFFECT_UNALIGNED:
        if cfg.rho != 0.0:
            raise UnsupportedConfig("unaligned random-effect limit needs i.i.d. noise (rho = 0)")
        return s2 + cfg.effect_var
    raise UnsupportedConfig(f"no analytic limit for study {cfg.study!r}")


def empirical_nvar(
    cfg: DgpConfig,
    n_list: Sequence[int],
    replicates: int,
    workers: int = 1,
) -> List[NvarEstimate]:
    """Monte Carlo n Var(beta_hat_1) with its standard error, for each n."""
    if replicates < 2:
        raise InvalidParameter(f"replicates must be >= 2, got {replicates}")

    estimates = []
    for n in n_list:
        cfg_n = replace(cfg, n=int(n))

        def deviation(r: int) -> float:
            sample = gen_dataset(cfg_n, substream(cfg.seed, STAGE_DATA, n, r), with_true_cov=False)
            return float(ols_fit(sample.dataset).values[0] - sample.true_beta[0])

        d = np.array(parallel_map(deviation, range(replicates), workers))
        squared = (d - d.mean()) ** 2
        nvar = n * float(np.sum(squared)) / (replicates - 1)
        se = n * float(np.std(squared, ddof=1)) / math.sqrt(replicates)
        logger.info(f"n={n}: n Var(beta_1) = {nvar:.4f} (se {se:.4f})")
        estimates.append(NvarEstimate(int(n), nvar, se))
    return estimates


_Cell = Tuple[Method, float, Optional[float], Optional[float]]


def _study_cells(
    methods: Sequence[Method],
    lambda_grid: Sequence[float],
    shrink_grid: Sequence[ShrinkageParams],
) -> List[_Cell]:
    cells: List[_Cell] = []
    for method in methods:
        if method == Method.OLS:
            cells.append((method, 0.0, None, None))
        elif method == Method.TWOREG_RIDGE:
            for params in shrink_grid:
                cells.extend((method, lam, params.kappa, params.mu) for lam in lambda_grid)
        else:
            cells.extend((method, lam, None, None) for lam in lambda_grid)
    return cells


def run_study(
    cfg: DgpConfig,
    methods: Sequence[Method],
    lambda_grid: Sequence[float],
    shrink_grid: Sequence[ShrinkageParams],
    replicates: int,
    bootstrap: BootstrapConfig,
    workers: int = 1,
    crude_estimator: CrudeEstimator = CrudeEstimator.BOOTSTRAP,
) -> List[StudyResult]:
    """Mean and standard error of ||beta_hat - beta||^2 per (method, lambda, kappa, mu).

    Replicate r draws its data from substream (seed, data, r) and its bootstrap
    from a seed derived from (seed, bootstrap, r). Any failing replicate aborts
    the study.
    """
    if replicates < 2:
        raise InvalidParameter(f"replicates must be >= 2, got {replicates}")
    methods = [Method(m) for m in methods]
    lambda_grid = [float(lam) for lam in lambda_grid]
    if not lambda_grid or min(lambda_grid) < 0.0:
        raise InvalidParameter(f"lambda grid must be nonempty and nonnegative: {lambda_grid}")
    if Method.TWOREG_RIDGE in methods and not shrink_grid:
        raise InvalidParameter("2REG ridge needs a nonempty shrinkage grid")

    cells = _study_cells(methods, lambda_grid, shrink_grid)
    need_true_cov = Method.CORRECT_TWOREG_RIDGE in methods
    logger.info(
        f"Running {cfg.study.value} study: n={cfg.n}, p={cfg.p}, sigma2={cfg.sigma2}, "
        f"{replicates} replicates, {len(cells)} cells"
    )

    def replicate(r: int) -> np.ndarray:
        sample = gen_dataset(cfg, substream(cfg.seed, STAGE_DATA, r), with_true_cov=need_true_cov)
        data, beta = sample.dataset, sample.true_beta
        fits = []
        for method in methods:
            if method == Method.OLS:
                fits.append(ols_fit(data).values)
            elif method == Method.STANDARD_RIDGE:
                fits.extend(c.values for c in ridge_path(data, lambda_grid))
            elif method == Method.CORRECT_TWOREG_RIDGE:
                fits.extend(c.values for c in ridge_path(data, lambda_grid, sample.true_cov))
            else:
                boot = BootstrapConfig(
                    bootstrap.iterations,
                    bootstrap.blocks,
                    derive_seed(cfg.seed, STAGE_BOOTSTRAP, r),
                )
                folds = FoldPlan.contiguous(data.n, bootstrap.blocks)
                crude = estimate_crude(data, crude_estimator, boot, folds)
                prior = prior_cov(data.design, crude)
                for params in shrink_grid:
                    cov = normalize(shrink(crude, prior, params), data.design)
                    fits.extend(c.values for c in ridge_path(data, lambda_grid, cov))

        estimates = np.stack(fits)
        metrics.study_replicates.labels(cfg.study.value).inc()
        logger.debug(f"Replicate {r} done")
        return np.column_stack(
            [
                np.sum((estimates - beta) ** 2, axis=1),
                estimates[:, 0] ** 2,
                np.sum(estimates**2, axis=1),
            ]
        )

    per_replicate = np.stack(parallel_map(replicate, range(replicates), workers))
    means = per_replicate.mean(axis=0)
    std_errors = per_replicate.std(axis=0, ddof=1) / math.sqrt(replicates)

    results = [
        StudyResult(
            method=method,
            lam=lam,
            kappa=kappa,
            mu=mu,
            mean_sq_error=float(means[i, 0]),
            std_error=float(std_errors[i, 0]),
            mean_beta1_sq=float(means[i, 1]),
            replicates=replicates,
            mean_beta_sq_total=float(means[i, 2]),
            beta1_std_error=float(std_errors[i, 1]),
        )
        for i, (method, lam, kappa, mu) in enumerate(cells)
    ]
    logger.info(f"Study finished: {len(results)} result rows")
    return results


def optimal_results(results: Sequence[StudyResult]) -> List[StudyResult]:
    """Per (method, kappa, mu): the grid lambda with the lowest mean error.

    Ties go to the smallest lambda. The choice depends on the grid.
    """
    best: Dict[tuple, StudyResult] = {}
    for result in results:
        key = (result.method, result.kappa, result.mu)
        current = best.get(key)
        if current is None or (result.mean_sq_error, result.lam) < (
            current.mean_sq_error,
            current.lam,
        ):
            best[key] = result
    return list(best.values())


def _column_label(kappa: float, mu: float) -> str:
    return f"mu={mu:g} kappa={kappa:g}"


def format_study_table(results: Sequence[StudyResult], quantity: str = "error") -> str:
    """Methods as rows and (mu, kappa) as columns, at each row's optimal lambda.

    quantity="error": mean squared error (standard error).
    quantity="beta1": mean beta_1^2 (mean sum of beta_j^2).
    Cells marked N/R do not apply to the method.
    """
    if quantity not in ("error", "beta1"):
        raise InvalidParameter(f"unknown table quantity {quantity!r}")

    best = optimal_results(results)
    shrink_columns = sorted(
        {(r.kappa, r.mu) for r in best if r.method == Method.TWOREG_RIDGE}
    ) or [(0.0, 0.0)]
    columns = [_column_label(k, m) for k, m in shrink_columns]

    rows = {}
    for method in Method:
        entries = [r for r in best if r.method == method]
        if not entries:
            continue
        row = {c: "N/R" for c in columns}
        for r in entries:
            if quantity == "error":
                cell = f"{r.mean_sq_error:.4f} ({r.std_error:.4f})"
            else:
                cell = f"{r.mean_beta1_sq:.3f} ({r.mean_beta_sq_total:.3f})"
            cell += f" lambda={r.lam:g}"
            if r.method == Method.TWOREG_RIDGE:
                row[_column_label(r.kappa, r.mu)] = cell
            else:
                row[columns[0]] = cell
        rows[METHOD_LABELS[method]] = row

    frame = pd.DataFrame.from_dict(rows, orient="index", columns=columns)
    frame.index.name = "method"
    return frame.to_string()


CSV_COLUMNS = [
    "method",
    "lambda",
    "kappa",
    "mu",
    "mean_sq_error",
    "std_error",
    "mean_beta1_sq",
    "replicates",
    "mean_beta_sq_total",
    "beta1_std_error",
]


def study_frame(results: Sequence[StudyResult]) -> pd.DataFrame:
    records = [
        {
            "method": r.method.value,
            "lambda": r.lam,
            "kappa": r.kappa,
            "mu": r.mu,
            "mean_sq_error": r.mean_sq_error,
            "std_error": r.std_error,
            "mean_beta1_sq": r.mean_beta1_sq,
            "replicates": r.replicates,
            "mean_beta_sq_total": r.mean_beta_sq_total,
            "beta1_std_error": r.beta1_std_error,
        }
        for r in results
    ]
    return pd.DataFrame.from_records(records, columns=CSV_COLUMNS)


def write_study_csv(results: Sequence[StudyResult], path: str) -> None:
    study_frame(results).to_csv(path, index=False)
    logger.info(f"Wrote {len(results)} study rows to {path}")
