"""
Regularized least-squares estimators.

- OLS and standard ridge via normal equations
- 2REG ridge: (X^T X + lambda X^T X C)^-1 X^T y
- normal 2REG: MAP of beta given beta_hat ~ N(beta, C) and a ridge prior,
  computed by reducing (beta_hat, C) to Cholesky pseudo-data and solving OLS
  with the prior on it
- exact covariance of generalized ridge estimators and the criterion for its
  monotone decrease in lambda
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Callable, Iterable, List, Optional, Union

import numpy as np
from scipy import linalg

import metrics
from config import Config
from errors import (
    DimensionMismatch,
    InvalidParameter,
    InvalidPenalty,
    NotPositiveSemidefinite,
    NumericalError,
    RankDeficient,
    SingularCovariance,
    SingularPenaltySystem,
)

logger = logging.getLogger(__name__)


class EstimatorKind(str, Enum):
    OLS = "ols"
    STANDARD_RIDGE = "standard_ridge"
    TWOREG_RIDGE = "tworeg_ridge"
    NORMAL_TWOREG = "normal_tworeg"


class CovarianceStage(str, Enum):
    CRUDE = "crude"
    SHRUNK = "shrunk"
    NORMALIZED = "normalized"
    PRIOR = "prior"
    TRUE_KNOWN = "true_known"


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """Design matrix (n x p) and response (n,).

    Shapes are validated on construction. Full column rank is checked by the
    fits that need it (require_full_rank), so degenerate datasets, e.g. built
    from a constant price series, can still be represented.
    """

    design: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        design = np.array(self.design, dtype=np.float64)
        response = np.array(self.response, dtype=np.float64)
        if design.ndim == 1:
            design = design.reshape(-1, 1)
        if design.ndim != 2:
            raise DimensionMismatch(f"design must be 2-D, got {design.ndim}-D")
        if response.ndim != 1:
            raise DimensionMismatch(f"response must be 1-D, got {response.ndim}-D")
        n, p = design.shape
        if response.shape[0] != n:
            raise DimensionMismatch(
                f"response length {response.shape[0]} != design rows {n}"
            )
        if p < 1 or n < p:
            raise DimensionMismatch(f"need n >= p >= 1, got n={n}, p={p}")
        if not (np.all(np.isfinite(design)) and np.all(np.isfinite(response))):
            raise InvalidParameter("dataset contains NaN or infinite values")

        object.__setattr__(self, "design", _frozen(design))
        object.__setattr__(self, "response", _frozen(response))

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        """X^T X"""
        return _frozen(self.design.T @ self.design)

    @cached_property
    def moment(self) -> np.ndarray:
        """X^T y"""
        return _frozen(self.design.T @ self.response)

    @cached_property
    def rank(self) -> int:
        return design_rank(self.design)

    def require_full_rank(self, fold: Optional[int] = None) -> None:
        if self.rank < self.p:
            raise RankDeficient(
                f"design has rank {self.rank} < {self.p} columns",
                tolerance=Config.RANK_TOLERANCE,
                fold=fold,
            )

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.design[rows], self.response[rows])


def design_rank(design: np.ndarray) -> int:
    """Numerical column rank of X (computed on X, not on X^T X)."""
    design = np.asarray(design, dtype=np.float64)
    if design.size == 0:
        return 0
    # Pivoted QR: |R_ii| are non-increasing and track the singular values
    r = linalg.qr(design, mode="r", pivoting=True, check_finite=False)[0]
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return 0
    return int(np.sum(diag > Config.RANK_TOLERANCE * diag[0]))


def is_full_column_rank(design: np.ndarray) -> bool:
    design = np.asarray(design)
    return design.ndim == 2 and design.shape[0] >= design.shape[1] and (
        design_rank(design) == design.shape[1]
    )


@dataclass(frozen=True, eq=False)
class Coefficients:
    values: np.ndarray
    estimator_kind: EstimatorKind
    lam: float = 0.0
    kappa: Optional[float] = None
    mu: Optional[float] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise NumericalError(f"{self.estimator_kind.value} produced non-finite coefficients")
        if self.lam < 0:
            raise InvalidPenalty(f"lambda must be >= 0, got {self.lam}")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def p(self) -> int:
        return self.values.shape[0]

    def to_dict(self) -> dict:
        return {
            "estimator_kind": self.estimator_kind.value,
            "lambda": self.lam,
            "kappa": self.kappa,
            "mu": self.mu,
            "values": [float(v) for v in self.values],
        }


@dataclass(frozen=True, eq=False)
class CovarianceMatrix:
    """Symmetric PSD p x p matrix tagged with its pipeline stage.

    Inputs are symmetrized as (A + A^T)/2; relative asymmetry beyond
    ASYMMETRY_TOLERANCE is rejected. Eigenvalues in [-tol*trace, 0) are clamped
    to zero, anything more negative raises NotPositiveSemidefinite.
    """

    entries: np.ndarray
    stage: CovarianceStage

    def __post_init__(self):
        a = np.array(self.entries, dtype=np.float64)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"covariance must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidParameter("covariance contains NaN or infinite values")

        scale = np.linalg.norm(a)
        if scale > 0.0:
            asymmetry = np.linalg.norm(a - a.T) / scale
            if asymmetry > Config.ASYMMETRY_TOLERANCE:
                raise InvalidParameter(
                    f"covariance is not symmetric (relative asymmetry {asymmetry:.3g})"
                )
        a = (a + a.T) / 2.0

        if scale > 0.0:
            a = self._clamp(a)

        object.__setattr__(self, "entries", _frozen(a))

    @staticmethod
    def _clamp(a: np.ndarray) -> np.ndarray:
        eigval, eigvec = linalg.eigh(a, check_finite=False)
        if eigval[0] >= 0.0:
            return a
        tol = Config.PSD_TOLERANCE * max(np.trace(a), 0.0)
        if eigval[0] < -tol:
            raise NotPositiveSemidefinite(
                f"smallest eigenvalue {eigval[0]:.3g} below -{tol:.3g}"
            )
        metrics.psd_clamps.inc()
        logger.debug(f"Clamping eigenvalues down to {eigval[0]:.3g}")
        clamped = (eigvec * np.maximum(eigval, 0.0)) @ eigvec.T
        return (clamped + clamped.T) / 2.0

    @property
    def p(self) -> int:
        return self.entries.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.entries))


@dataclass(frozen=True, eq=False)
class PseudoData:
    """p x p design and length-p response with
    design_tilde^T design_tilde = C^-1 and design_tilde^T response_tilde = C^-1 beta_hat."""

    design_tilde: np.ndarray
    response_tilde: np.ndarray

    def as_dataset(self) -> Dataset:
        return Dataset(self.design_tilde, self.response_tilde)


@dataclass(frozen=True)
class GaussianPrior:
    """Mean-zero Gaussian prior with precision lambda * I."""

    precision: float = 0.0

    def __post_init__(self):
        _check_penalty(self.precision)


CoefficientsLike = Union[Coefficients, np.ndarray, Iterable[float]]
MatrixLike = Union[CovarianceMatrix, np.ndarray]


def _check_penalty(lam: float) -> float:
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0:
        raise InvalidPenalty(f"lambda must be a finite nonnegative number, got {lam}")
    return lam


def _values(beta_hat: CoefficientsLike) -> np.ndarray:
    if isinstance(beta_hat, Coefficients):
        return beta_hat.values
    return np.asarray(beta_hat, dtype=np.float64).reshape(-1)


def _matrix(m: MatrixLike) -> np.ndarray:
    if isinstance(m, CovarianceMatrix):
        return m.entries
    return np.asarray(m, dtype=np.float64)


def _check_square(m: np.ndarray, p: int, name: str) -> None:
    if m.shape != (p, p):
        raise DimensionMismatch(f"{name} has shape {m.shape}, expected ({p}, {p})")


def _jitter(matrix: np.ndarray) -> float:
    p = matrix.shape[0]
    return Config.JITTER_FACTOR * abs(np.trace(matrix)) / p


def _cholesky(
    matrix: np.ndarray,
    operation: str,
    on_failure: Callable[[str], Exception],
) -> np.ndarray:
    """Lower Cholesky factor, retried once with diagonal jitter."""
    try:
        return linalg.cholesky(matrix, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass

    jitter = _jitter(matrix)
    logger.warning(f"{operation}: factorization failed, retrying with jitter {jitter:.3g}")
    metrics.jitter_applied.labels(operation).inc()
    try:
        if jitter <= 0.0:
            raise linalg.LinAlgError("zero jitter")
        return linalg.cholesky(
            matrix + jitter * np.eye(matrix.shape[0]), lower=True, check_finite=False
        )
    except linalg.LinAlgError as e:
        raise on_failure(f"{operation}: matrix is not positive definite ({e})") from e


def _solve_spd(
    matrix: np.ndarray,
    rhs: np.ndarray,
    operation: str,
    on_failure: Callable[[str], Exception],
) -> np.ndarray:
    chol = _cholesky(matrix, operation, on_failure)
    return linalg.cho_solve((chol, True), rhs, check_finite=False)


def _rank_failure(message: str) -> Exception:
    return RankDeficient(message, tolerance=Config.RANK_TOLERANCE)


def solve_normal_equations(
    gram: np.ndarray, moment: np.ndarray, operation: str = "normal_equations"
) -> np.ndarray:
    """Solve gram @ beta = moment for a symmetric PD gram (vector or matrix rhs)."""
    return _solve_spd(gram, moment, operation, _rank_failure)


def ols_fit(data: Dataset) -> Coefficients:
    """beta_hat = (X^T X)^-1 X^T y"""
    data.require_full_rank()
    values = solve_normal_equations(data.gram, data.moment, "ols_fit")
    return Coefficients(values, EstimatorKind.OLS, 0.0)


def ridge_fit(data: Dataset, lam: float) -> Coefficients:
    """beta_hat = (X^T X + lambda I)^-1 X^T y"""
    lam = _check_penalty(lam)
    if lam == 0.0:
        ols = ols_fit(data)
        return Coefficients(ols.values, EstimatorKind.STANDARD_RIDGE, 0.0)

    system = data.gram + lam * np.eye(data.p)
    values = _solve_spd(system, data.moment, "ridge_fit", _rank_failure)
    return Coefficients(values, EstimatorKind.STANDARD_RIDGE, lam)


def tworeg_ridge_fit(
    data: Dataset,
    cov: CovarianceMatrix,
    lam: float,
    kappa: Optional[float] = None,
    mu: Optional[float] = None,
) -> Coefficients:
    """beta_hat = (X^T X + lambda X^T X C)^-1 X^T y

    The system is solved as written (it is not symmetric in general).
    """
    lam = _check_penalty(lam)
    c = _matrix(cov)
    _check_square(c, data.p, "covariance")

    if lam == 0.0:
        ols = ols_fit(data)
        return Coefficients(ols.values, EstimatorKind.TWOREG_RIDGE, 0.0, kappa, mu)

    data.require_full_rank()
    gram = data.gram
    system = gram + lam * (gram @ c)
    try:
        values = linalg.solve(system, data.moment, check_finite=False)
    except linalg.LinAlgError as e:
        raise SingularPenaltySystem(f"X^T X + lambda X^T X C is singular: {e}") from e

    if Config.DEBUG_CHECKS:
        ols = ols_fit(data).values
        factored = linalg.solve(np.eye(data.p) + lam * c, ols)
        scale = max(np.linalg.norm(values), np.finfo(float).tiny)
        gap = np.linalg.norm(values - factored) / scale
        assert gap <= Config.TWO_FORM_TOLERANCE, (
            f"tworeg_ridge_fit direct and factored forms differ by {gap:.3g}"
        )

    return Coefficients(values, EstimatorKind.TWOREG_RIDGE, lam, kappa, mu)


def ridge_path(
    data: Dataset,
    lambdas: Iterable[float],
    cov: Optional[CovarianceMatrix] = None,
) -> List[Coefficients]:
    """Standard ridge (cov=None) or 2REG ridge along a lambda sweep."""
    if cov is None:
        return [ridge_fit(data, lam) for lam in lambdas]
    return [tworeg_ridge_fit(data, cov, lam) for lam in lambdas]


def cholesky_pseudo_data(beta_hat: CoefficientsLike, cov: CovarianceMatrix) -> PseudoData:
    """Reduce (beta_hat, C) to an OLS problem.

    With C = L L^T: design_tilde = L^-1, response_tilde = L^-1 beta_hat.
    """
    b = _values(beta_hat)
    c = _matrix(cov)
    _check_square(c, b.shape[0], "covariance")

    lower = _cholesky(c, "cholesky_pseudo_data", SingularCovariance)
    p = b.shape[0]
    design_tilde = linalg.solve_triangular(lower, np.eye(p), lower=True, check_finite=False)
    response_tilde = linalg.solve_triangular(lower, b, lower=True, check_finite=False)
    return PseudoData(design_tilde, response_tilde)


def normal_tworeg_fit(
    beta_hat: CoefficientsLike,
    cov: CovarianceMatrix,
    prior: GaussianPrior,
) -> Coefficients:
    """argmax_beta p(beta_hat | beta) p(beta) = (C^-1 + lambda I)^-1 C^-1 beta_hat

    Depends on the data only through (beta_hat, C).
    """
    b = _values(beta_hat)
    pseudo = cholesky_pseudo_data(b, cov)
    lam = prior.precision

    if lam == 0.0:
        return Coefficients(b.copy(), EstimatorKind.NORMAL_TWOREG, 0.0)

    p = b.shape[0]
    xt = pseudo.design_tilde.T
    system = xt @ pseudo.design_tilde + lam * np.eye(p)
    values = _solve_spd(
        system, xt @ pseudo.response_tilde, "normal_tworeg_fit", SingularCovariance
    )
    return Coefficients(values, EstimatorKind.NORMAL_TWOREG, lam)


def shrinkage_operator(cov: MatrixLike, lam: float) -> np.ndarray:
    """The linear map beta_hat -> (C^-1 + lambda I)^-1 C^-1 beta_hat, i.e. (I + lambda C)^-1."""
    lam = _check_penalty(lam)
    c = _matrix(cov)
    p = c.shape[0]
    try:
        return linalg.solve(np.eye(p) + lam * c, np.eye(p), check_finite=False)
    except linalg.LinAlgError as e:
        raise SingularPenaltySystem(f"I + lambda C is singular: {e}") from e


def ridge_estimator_covariance(
    design: Union[np.ndarray, Dataset],
    penalty: Optional[MatrixLike],
    ols_cov: CovarianceMatrix,
    lam: float,
) -> CovarianceMatrix:
    """Cov of (X^T X + lambda X^T X Lambda)^-1 X^T y:
    (I + lambda Lambda)^-1 C (I + lambda Lambda^T)^-1.

    penalty=None means standard ridge, Lambda = (X^T X)^-1.
    """
    lam = _check_penalty(lam)
    x = design.design if isinstance(design, Dataset) else np.asarray(design, dtype=np.float64)
    p = x.shape[1]
    c = _matrix(ols_cov)
    _check_square(c, p, "ols_cov")

    if penalty is None:
        gram = x.T @ x
        penalty_matrix = _solve_spd(gram, np.eye(p), "ridge_estimator_covariance", _rank_failure)
    else:
        penalty_matrix = _matrix(penalty)
        _check_square(penalty_matrix, p, "penalty")

    if lam == 0.0:
        return CovarianceMatrix(c, CovarianceStage.TRUE_KNOWN)

    system = np.eye(p) + lam * penalty_matrix
    with np.errstate(divide="ignore", invalid="ignore"):
        condition = np.linalg.cond(system)
    if not condition < 1.0 / np.finfo(float).eps:
        raise SingularPenaltySystem(f"I + lambda*Lambda is singular at lambda={lam}")
    try:
        inverse = linalg.solve(system, np.eye(p), check_finite=False)
    except linalg.LinAlgError as e:
        raise SingularPenaltySystem(f"I + lambda*Lambda is singular at lambda={lam}: {e}") from e

    return CovarianceMatrix(inverse @ c @ inverse.T, CovarianceStage.TRUE_KNOWN)


def monotonicity_criterion(penalty: MatrixLike, ols_cov: CovarianceMatrix) -> bool:
    """True iff Lambda^T C^-1 + C^-1 Lambda is positive definite.

    That is the condition for Cov of the generalized ridge estimator to
    decrease in lambda in the Loewner order.
    """
    c = _matrix(ols_cov)
    lam_matrix = _matrix(penalty)
    p = c.shape[0]
    _check_square(lam_matrix, p, "penalty")

    lower = _cholesky(c, "monotonicity_criterion", SingularCovariance)
    c_inv = linalg.cho_solve((lower, True), np.eye(p), check_finite=False)

    criterion = lam_matrix.T @ c_inv + c_inv @ lam_matrix
    criterion = (criterion + criterion.T) / 2.0
    trace = np.trace(criterion)
    if trace <= 0.0:
        return False
    smallest = linalg.eigvalsh(criterion, check_finite=False)[0]
    return bool(smallest > Config.PSD_TOLERANCE * trace)
