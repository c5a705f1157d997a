"""
Covariance estimation for OLS coefficients, in three steps:

1. Estimation: block bootstrap, or cross-validated HAC-style sandwich
2. Regularization: convex combination with the prior Pi (kappa) and PCA
   denoising in Pi's eigenbasis (mu)
3. Normalization: rescale so that tr(X^T X C) = p

(kappa, mu) are chosen by cross validation against unregularized
out-of-fold covariance estimates.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, optimize
from sklearn.model_selection import KFold

import metrics
from config import Config
from errors import (
    BootstrapDegenerate,
    DegenerateNormalization,
    DegeneratePrior,
    DimensionMismatch,
    InvalidParameter,
    RankDeficient,
    SelectionFoldFailure,
    TworegError,
)
from estimators import (
    CovarianceMatrix,
    CovarianceStage,
    Dataset,
    is_full_column_rank,
    solve_normal_equations,
)
from rng import STAGE_SELECTION, derive_seed, parallel_map, substream

logger = logging.getLogger(__name__)

SHRINK_VALUES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True, order=True)
class ShrinkageParams:
    kappa: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        for name in ("kappa", "mu"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise InvalidParameter(f"{name} must lie in [0, 1], got {value}")


def default_shrink_grid(values: Sequence[float] = SHRINK_VALUES) -> List[ShrinkageParams]:
    return [ShrinkageParams(kappa, mu) for kappa in values for mu in values]


@dataclass(frozen=True)
class BootstrapConfig:
    iterations: int = 2000
    blocks: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 2:
            raise InvalidParameter(
                f"bootstrap needs at least 2 iterations, got {self.iterations}"
            )
        if self.blocks < 1:
            raise InvalidParameter(f"blocks must be >= 1, got {self.blocks}")
        if not (0 <= self.seed < 2**64):
            raise InvalidParameter(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True)
class FoldPlan:
    """Contiguous (start, end) ranges partitioning [0, n)."""

    boundaries: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        bounds = tuple((int(s), int(e)) for s, e in self.boundaries)
        if not bounds:
            raise InvalidParameter("fold plan is empty")
        position = 0
        for start, end in bounds:
            if start != position or end <= start:
                raise InvalidParameter(f"folds must be contiguous and non-empty: {bounds}")
            position = end
        sizes = [e - s for s, e in bounds]
        if max(sizes) - min(sizes) > 1:
            raise InvalidParameter(f"fold sizes differ by more than one: {sizes}")
        object.__setattr__(self, "boundaries", bounds)

    @classmethod
    def contiguous(cls, n: int, folds: int) -> "FoldPlan":
        """The first n mod folds ranges get one extra observation."""
        if folds < 1 or folds > n:
            raise InvalidParameter(f"need 1 <= folds <= n, got folds={folds}, n={n}")
        if folds == 1:
            return cls(((0, n),))
        splitter = KFold(n_splits=folds, shuffle=False)
        return cls(
            tuple(
                (int(held[0]), int(held[-1]) + 1)
                for _, held in splitter.split(np.empty((n, 1)))
            )
        )

    @property
    def n(self) -> int:
        return self.boundaries[-1][1]

    def __len__(self) -> int:
        return len(self.boundaries)

    def rows(self, fold: int) -> np.ndarray:
        start, end = self.boundaries[fold]
        return np.arange(start, end)

    def complement(self, fold: int) -> np.ndarray:
        start, end = self.boundaries[fold]
        return np.concatenate([np.arange(0, start), np.arange(end, self.n)])


class Metric(str, Enum):
    FROBENIUS = "frobenius"
    GAUSSIAN_KL = "gaussian_kl"


class CrudeEstimator(str, Enum):
    BOOTSTRAP = "bootstrap"
    HAC = "hac"


# Injected crude estimators receive the dataset and its row positions in the
# dataset being cross-validated.
CrudeEstimatorFn = Callable[[Dataset, np.ndarray], CovarianceMatrix]


def _design(design: Union[np.ndarray, Dataset]) -> np.ndarray:
    if isinstance(design, Dataset):
        return design.design
    return np.asarray(design, dtype=np.float64)


def _check_pair(a: CovarianceMatrix, b: CovarianceMatrix) -> None:
    if a.p != b.p:
        raise DimensionMismatch(f"covariance sizes differ: {a.p} vs {b.p}")


# Estimation


class _RedrawBudget:
    """Rank-deficient redraws shared by every replicate of one bootstrap call."""

    def __init__(self, limit: int, context: str):
        self.limit = limit
        self.context = context
        self.spent = 0
        self._lock = threading.Lock()

    def check(self) -> None:
        with self._lock:
            spent = self.spent
        if spent > self.limit:
            raise BootstrapDegenerate(
                f"more than {self.limit} rank-deficient resamples ({self.context})"
            )

    def spend(self) -> None:
        with self._lock:
            self.spent += 1
        metrics.bootstrap_redraws.inc()
        self.check()


def block_bootstrap_cov(
    data: Dataset, cfg: BootstrapConfig, workers: int = 1
) -> CovarianceMatrix:
    """Sample covariance of B OLS fits on block-resampled data.

    The data is cut into cfg.blocks contiguous blocks; each replicate draws that
    many block indices with replacement and concatenates them. Replicate b uses
    the substream (seed, b), and a rank-deficient resample is redrawn from the
    same substream. The call fails as soon as the redraws of all replicates
    together exceed REDRAW_FACTOR * B.
    """
    n = data.n
    if cfg.blocks > n:
        raise InvalidParameter(f"blocks ({cfg.blocks}) exceeds observations ({n})")

    plan = FoldPlan.contiguous(n, cfg.blocks)
    block_rows = [plan.rows(k) for k in range(len(plan))]
    grams = np.stack([data.design[rows].T @ data.design[rows] for rows in block_rows])
    moments = np.stack([data.design[rows].T @ data.response[rows] for rows in block_rows])
    budget = _RedrawBudget(
        Config.REDRAW_FACTOR * cfg.iterations, f"B={cfg.iterations}, blocks={cfg.blocks}"
    )

    def replicate(b: int) -> np.ndarray:
        budget.check()
        gen = substream(cfg.seed, b)
        while True:
            picks = gen.integers(0, cfg.blocks, size=cfg.blocks)
            rows = np.concatenate([block_rows[k] for k in picks])
            if is_full_column_rank(data.design[rows]):
                break
            budget.spend()
        gram = grams[picks].sum(axis=0)
        moment = moments[picks].sum(axis=0)
        return solve_normal_equations(gram, moment, "block_bootstrap_cov")

    try:
        betas = np.stack(parallel_map(replicate, range(cfg.iterations), workers))
    except BootstrapDegenerate as e:
        logger.error(f"Bootstrap gave up after {budget.spent} redraws: {e}")
        raise
    if budget.spent:
        logger.warning(f"Bootstrap redrew {budget.spent} rank-deficient resamples")
    metrics.bootstrap_replicates.inc(cfg.iterations)

    centered = betas - betas.mean(axis=0)
    cov = centered.T @ centered / (cfg.iterations - 1)
    return CovarianceMatrix(cov, CovarianceStage.CRUDE)


def cv_hac_cov(data: Dataset, folds: FoldPlan, workers: int = 1) -> CovarianceMatrix:
    """(X^T X)^-1 (sum_w X_w^T e_w e_w^T X_w) (X^T X)^-1 with out-of-fold residuals

    e_w = y_w - X_w beta^w, beta^w being OLS on every fold but w.
    """
    if folds.n != data.n:
        raise DimensionMismatch(f"fold plan covers {folds.n} rows, dataset has {data.n}")
    data.require_full_rank()

    def fold_score(fold: int) -> np.ndarray:
        held = folds.rows(fold)
        kept = folds.complement(fold)
        x_kept = data.design[kept]
        gram = x_kept.T @ x_kept
        if not is_full_column_rank(x_kept):
            raise RankDeficient(
                "leave-one-fold-out design is rank deficient",
                tolerance=Config.RANK_TOLERANCE,
                fold=fold,
            )
        beta = solve_normal_equations(gram, x_kept.T @ data.response[kept], "cv_hac_cov")
        x_held = data.design[held]
        residual = data.response[held] - x_held @ beta
        return x_held.T @ residual

    scores = np.stack(parallel_map(fold_score, range(len(folds)), workers))
    meat = scores.T @ scores
    gram_inv = solve_normal_equations(data.gram, np.eye(data.p), "cv_hac_cov")
    return CovarianceMatrix(gram_inv @ meat @ gram_inv, CovarianceStage.CRUDE)


# Regularization


def prior_cov(design: Union[np.ndarray, Dataset], crude: CovarianceMatrix) -> CovarianceMatrix:
    """Pi = (X^T X)^-1 * tr(C_hat) / tr((X^T X)^-1)"""
    x = _design(design)
    p = x.shape[1]
    if crude.p != p:
        raise DimensionMismatch(f"crude covariance is {crude.p}x{crude.p}, design has {p} columns")
    target = crude.trace
    if not target > 0.0:
        raise DegeneratePrior(f"crude covariance has trace {target:g}; prior cannot be scaled")

    gram_inv = solve_normal_equations(x.T @ x, np.eye(p), "prior_cov")
    return CovarianceMatrix(gram_inv * (target / np.trace(gram_inv)), CovarianceStage.PRIOR)


def pca_project(crude: CovarianceMatrix, prior: CovarianceMatrix) -> CovarianceMatrix:
    """U ((U^T C U) o I) U^T, U the eigenbasis of the prior.

    The Frobenius-nearest matrix to C among those diagonal in U.
    """
    _check_pair(crude, prior)
    basis = linalg.eigh(prior.entries, check_finite=False)[1]
    rotated = basis.T @ crude.entries @ basis
    projected = (basis * np.diag(rotated)) @ basis.T
    return CovarianceMatrix(projected, crude.stage)


def shrink(
    crude: CovarianceMatrix, prior: CovarianceMatrix, params: ShrinkageParams
) -> CovarianceMatrix:
    """(1 - kappa) ((1 - mu) C + mu p_Pi(C)) + kappa Pi"""
    _check_pair(crude, prior)
    kappa, mu = params.kappa, params.mu

    inner = crude.entries
    if mu > 0.0:
        inner = (1.0 - mu) * crude.entries + mu * pca_project(crude, prior).entries
    combined = (1.0 - kappa) * inner + kappa * prior.entries
    return CovarianceMatrix(combined, CovarianceStage.SHRUNK)


def _argmin_linear(jacobian: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Numerically minimize ||jacobian @ x + offset||^2."""
    result = optimize.least_squares(
        lambda x: jacobian @ x + offset,
        np.zeros(jacobian.shape[1]),
        jac=lambda x: jacobian,
        method="lm",
        xtol=1e-15,
        ftol=1e-15,
        gtol=1e-15,
    )
    return result.x


def _relative_gap(found: np.ndarray, expected: np.ndarray) -> float:
    scale = max(np.linalg.norm(expected), np.finfo(float).tiny)
    return float(np.linalg.norm(found - expected) / scale)


def verify_convex_shrinkage(crude: CovarianceMatrix, prior: CovarianceMatrix, kappa: float) -> bool:
    """Check that argmin_G ||C - G||_F^2 + l ||G - Pi||_F^2 with l = kappa/(1-kappa)
    is the convex combination (1 - kappa) C + kappa Pi."""
    _check_pair(crude, prior)
    if not (0.0 <= kappa < 1.0):
        raise InvalidParameter(f"kappa must lie in [0, 1), got {kappa}")
    p = crude.p
    weight = np.sqrt(kappa / (1.0 - kappa))

    identity = np.eye(p * p)
    jacobian = np.vstack([-identity, weight * identity])
    offset = np.concatenate([crude.entries.ravel(), -weight * prior.entries.ravel()])
    gamma = _argmin_linear(jacobian, offset).reshape(p, p)

    expected = (1.0 - kappa) * crude.entries + kappa * prior.entries
    gap = _relative_gap(gamma, expected)
    logger.debug(f"verify_convex_shrinkage kappa={kappa}: relative gap {gap:.3g}")
    return gap <= Config.ARGMIN_CHECK_TOLERANCE


def verify_pca_penalty(crude: CovarianceMatrix, prior: CovarianceMatrix, mu: float) -> bool:
    """Check that argmin_G ||C - G||_F^2 + l sum_{i!=j} (u_i^T G u_j)^2 with
    l = mu/(1-mu) is (1 - mu) C + mu p_Pi(C)."""
    _check_pair(crude, prior)
    if not (0.0 <= mu < 1.0):
        raise InvalidParameter(f"mu must lie in [0, 1), got {mu}")
    p = crude.p
    weight = np.sqrt(mu / (1.0 - mu))
    basis = linalg.eigh(prior.entries, check_finite=False)[1]

    # row-major vec(U^T G U) = (U^T kron U^T) vec(G)
    rotate = np.kron(basis.T, basis.T)
    off_diagonal = ~np.eye(p, dtype=bool).ravel()
    jacobian = np.vstack([-np.eye(p * p), weight * rotate[off_diagonal]])
    offset = np.concatenate([crude.entries.ravel(), np.zeros(int(off_diagonal.sum()))])
    gamma = _argmin_linear(jacobian, offset).reshape(p, p)

    expected = (1.0 - mu) * crude.entries + mu * pca_project(crude, prior).entries
    gap = _relative_gap(gamma, expected)
    logger.debug(f"verify_pca_penalty mu={mu}: relative gap {gap:.3g}")
    return gap <= Config.ARGMIN_CHECK_TOLERANCE


# Normalization


def normalize(shrunk: CovarianceMatrix, design: Union[np.ndarray, Dataset]) -> CovarianceMatrix:
    """C * p / tr(X^T X C), so that tr(X^T X C_norm) = p."""
    x = _design(design)
    p = x.shape[1]
    if shrunk.p != p:
        raise DimensionMismatch(f"covariance is {shrunk.p}x{shrunk.p}, design has {p} columns")
    gram = x.T @ x
    trace = float(np.sum(gram * shrunk.entries))
    if not trace > 0.0:
        raise DegenerateNormalization(f"tr(X^T X C) = {trace:g} is not positive")
    return CovarianceMatrix(shrunk.entries * (p / trace), CovarianceStage.NORMALIZED)


# Selection of (kappa, mu)


def frobenius_distance(a: CovarianceMatrix, b: CovarianceMatrix) -> float:
    return float(np.linalg.norm(a.entries - b.entries))


def gaussian_kl_distance(a: CovarianceMatrix, b: CovarianceMatrix) -> float:
    """KL(N(0,A) || N(0,B)) + KL(N(0,B) || N(0,A)); inf when either is singular."""
    try:
        a_chol = linalg.cho_factor(a.entries, check_finite=False)
        b_chol = linalg.cho_factor(b.entries, check_finite=False)
    except linalg.LinAlgError:
        return float("inf")
    p = a.p
    forward = np.trace(linalg.cho_solve(b_chol, a.entries, check_finite=False))
    backward = np.trace(linalg.cho_solve(a_chol, b.entries, check_finite=False))
    return float(0.5 * (forward + backward) - p)


_METRICS = {
    Metric.FROBENIUS: frobenius_distance,
    Metric.GAUSSIAN_KL: gaussian_kl_distance,
}


def _unit_trace(cov: CovarianceMatrix) -> CovarianceMatrix:
    trace = cov.trace
    if not trace > 0.0:
        raise DegenerateNormalization(f"covariance has trace {trace:g}")
    return CovarianceMatrix(cov.entries / trace, cov.stage)


def estimate_crude(
    data: Dataset,
    estimator: CrudeEstimator,
    cfg: BootstrapConfig,
    folds: Optional[FoldPlan] = None,
    workers: int = 1,
) -> CovarianceMatrix:
    if estimator == CrudeEstimator.HAC:
        folds = folds or FoldPlan.contiguous(data.n, min(cfg.blocks, data.n))
        return cv_hac_cov(data, folds, workers)
    return block_bootstrap_cov(data, cfg, workers)


def _builtin_estimator(
    estimator: CrudeEstimator, cfg: BootstrapConfig, blocks: int, fold: int, role: int
) -> CrudeEstimatorFn:
    def estimate(subset: Dataset, rows: np.ndarray) -> CovarianceMatrix:
        sub_cfg = BootstrapConfig(
            iterations=cfg.iterations,
            blocks=min(blocks, subset.n),
            seed=derive_seed(cfg.seed, STAGE_SELECTION, fold, role),
        )
        return estimate_crude(subset, estimator, sub_cfg)

    return estimate


def shrinkage_scores(
    data: Dataset,
    folds: FoldPlan,
    grid: Sequence[ShrinkageParams],
    cfg: BootstrapConfig,
    metric: Metric = Metric.FROBENIUS,
    estimator: Union[CrudeEstimator, CrudeEstimatorFn] = CrudeEstimator.BOOTSTRAP,
    workers: int = 1,
) -> Tuple[List[ShrinkageParams], np.ndarray]:
    """Cross-validated distance of every grid point, summed over folds.

    Returns the grid sorted by (kappa, mu) and the matching scores. Both the
    shrunk in-fold estimate and the unregularized held-out estimate are
    scaled to unit trace before comparison; the fitted 2REG estimator only
    sees the normalized covariance, so only its shape is scored.
    """
    if not grid:
        raise InvalidParameter("shrinkage grid is empty")
    if len(folds) < 2:
        raise InvalidParameter(f"selection needs at least 2 folds, got {len(folds)}")
    if folds.n != data.n:
        raise DimensionMismatch(f"fold plan covers {folds.n} rows, dataset has {data.n}")

    ordered = sorted(set(grid))
    distance = _METRICS[Metric(metric)]

    def fold_scores(fold: int) -> np.ndarray:
        held = folds.rows(fold)
        kept = folds.complement(fold)
        try:
            if callable(estimator):
                in_fn = out_fn = estimator
            else:
                in_fn = _builtin_estimator(estimator, cfg, len(folds) - 1, fold, 0)
                out_fn = _builtin_estimator(estimator, cfg, cfg.blocks, fold, 1)

            train = data.subset(kept)
            crude = in_fn(train, kept)
            prior = prior_cov(train.design, crude)
            target = _unit_trace(out_fn(data.subset(held), held))
            return np.array(
                [distance(_unit_trace(shrink(crude, prior, g)), target) for g in ordered]
            )
        except TworegError as e:
            logger.error(f"Shrinkage selection failed on fold {fold}: {e}")
            raise SelectionFoldFailure(str(e), fold) from e

    per_fold = parallel_map(fold_scores, range(len(folds)), workers)
    totals = np.zeros(len(ordered))
    for scores in per_fold:
        totals = totals + scores
    return ordered, totals


def select_shrinkage(
    data: Dataset,
    folds: FoldPlan,
    grid: Sequence[ShrinkageParams],
    cfg: BootstrapConfig,
    metric: Metric = Metric.FROBENIUS,
    estimator: Union[CrudeEstimator, CrudeEstimatorFn] = CrudeEstimator.BOOTSTRAP,
    workers: int = 1,
) -> ShrinkageParams:
    """Grid point with the smallest summed out-of-fold distance.

    Ties go to the smallest kappa, then the smallest mu.
    """
    ordered, totals = shrinkage_scores(data, folds, grid, cfg, metric, estimator, workers)
    best = ordered[int(np.argmin(totals))]
    logger.info(
        f"Selected kappa={best.kappa}, mu={best.mu} "
        f"(score {totals.min():.6g} over {len(folds)} folds, {len(ordered)} grid points)"
    )
    return best


# Pipeline


@dataclass(frozen=True, eq=False)
class CovariancePipelineResult:
    crude: CovarianceMatrix
    prior: CovarianceMatrix
    shrunk: CovarianceMatrix
    normalized: CovarianceMatrix
    params: ShrinkageParams


def covariance_pipeline(
    data: Dataset,
    cfg: BootstrapConfig,
    estimator: CrudeEstimator = CrudeEstimator.BOOTSTRAP,
    params: Optional[ShrinkageParams] = None,
    grid: Optional[Sequence[ShrinkageParams]] = None,
    folds: Optional[FoldPlan] = None,
    metric: Metric = Metric.FROBENIUS,
    workers: int = 1,
) -> CovariancePipelineResult:
    """Estimation, regularization (fixed or cross-validated params), normalization."""
    folds = folds or FoldPlan.contiguous(data.n, cfg.blocks)
    crude = estimate_crude(data, CrudeEstimator(estimator), cfg, folds, workers)
    prior = prior_cov(data.design, crude)
    if params is None:
        params = select_shrinkage(
            data, folds, grid or default_shrink_grid(), cfg, metric, CrudeEstimator(estimator), workers
        )
    shrunk = shrink(crude, prior, params)
    normalized = normalize(shrunk, data.design)
    return CovariancePipelineResult(crude, prior, shrunk, normalized, params)


# Plain-text matrix format: one row per line, full-precision decimals


def write_matrix(path: str, cov: Union[CovarianceMatrix, np.ndarray]) -> None:
    entries = cov.entries if isinstance(cov, CovarianceMatrix) else np.asarray(cov)
    np.savetxt(path, np.atleast_2d(entries), fmt="%.17g", delimiter=" ")
    logger.info(f"Wrote {entries.shape[0]}x{entries.shape[1]} matrix to {path}")


def read_matrix(path: str, stage: CovarianceStage = CovarianceStage.CRUDE) -> CovarianceMatrix:
    return CovarianceMatrix(np.loadtxt(path, ndmin=2), stage)
