"""
Stock-return prediction study.

Daily closes of a handful of stocks are turned into a regression per target
stock: the response is the target's log return over the next `horizon`
trading days, the covariates are the short and long trailing log returns of
every stock. Standard ridge and 2REG ridge are fitted on the training period
and scored on the test period by r^2 against the all-zero predictor, pooled
over targets.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import Config
from covariance import (
    BootstrapConfig,
    CrudeEstimator,
    FoldPlan,
    Metric,
    ShrinkageParams,
    covariance_pipeline,
    normalize,
)
from errors import (
    DataFileNotFound,
    DegenerateR2,
    DimensionMismatch,
    InsufficientData,
    InvalidParameter,
    ParseError,
    TickerNotFound,
)
from estimators import Coefficients, Dataset, ridge_path
from rng import STAGE_BOOTSTRAP, derive_seed, parallel_map
from time_utils import format_date, parse_date

logger = logging.getLogger(__name__)

DEFAULT_TICKERS = ("MSFT", "AAPL", "FB", "GOOGL", "AMZN")
DEFAULT_TRAIN_END = date(2016, 12, 30)
DEFAULT_TEST_START = date(2017, 1, 3)
DEFAULT_HORIZON = 10
DEFAULT_SHORT_LAG = 1
DEFAULT_LONG_LAG = 5

STANDARD_RIDGE = "standard_ridge"
TWOREG_RIDGE = "tworeg_ridge"
TWOREG_RIDGE_UNREGULARIZED = "tworeg_ridge_unregularized"
CURVE_METHODS = (STANDARD_RIDGE, TWOREG_RIDGE, TWOREG_RIDGE_UNREGULARIZED)


def default_lambda_grid() -> List[float]:
    """0 followed by 25 log-spaced points over [1, 1e6]."""
    return [0.0] + [float(v) for v in np.logspace(0.0, 6.0, 25)]


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class PriceSeries:
    ticker: str
    dates: Tuple[date, ...]
    closes: np.ndarray

    def __post_init__(self):
        closes = np.array(self.closes, dtype=float)
        closes.setflags(write=False)
        object.__setattr__(self, "closes", closes)
        object.__setattr__(self, "dates", tuple(self.dates))
        if closes.ndim != 1 or len(self.dates) != closes.shape[0]:
            raise DimensionMismatch(
                f"{self.ticker}: {len(self.dates)} dates but {closes.shape} closes"
            )
        if not (np.all(np.isfinite(closes)) and np.all(closes > 0.0)):
            raise InvalidParameter(f"{self.ticker}: closes must be finite and positive")
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise InvalidParameter(f"{self.ticker}: dates must be strictly increasing")

    def __len__(self) -> int:
        return len(self.dates)

    def between(self, start: Optional[date] = None, end: Optional[date] = None) -> "PriceSeries":
        """Observations with start <= date <= end."""
        keep = [
            i
            for i, d in enumerate(self.dates)
            if (start is None or d >= start) and (end is None or d <= end)
        ]
        return PriceSeries(self.ticker, [self.dates[i] for i in keep], self.closes[keep])


@dataclass(frozen=True, eq=False)
class ReturnDataset:
    target_ticker: str
    dataset: Dataset
    covariate_names: Tuple[str, ...]
    split: Split
    dates: Tuple[date, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.dataset.n


def load_prices(
    path: str,
    tickers: Sequence[str],
    date_column: str = Config.PRICE_DATE_COLUMN,
    symbol_column: str = Config.PRICE_SYMBOL_COLUMN,
    close_column: str = Config.PRICE_CLOSE_COLUMN,
    min_rows: int = Config.MIN_ALIGNED_ROWS,
) -> List[PriceSeries]:
    """Read closes for the requested tickers, aligned on their common dates.

    Only rows of requested tickers are validated. Line numbers in ParseError
    count the header as line 1.
    """
    if not tickers:
        raise InvalidParameter("at least one ticker is required")
    if not os.path.exists(path):
        raise DataFileNotFound(f"price file not found: {path}")

    try:
        # Blank lines stay in the frame so that index + 2 is the physical line
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        logger.error(f"Failed to read price file {path}: {e}")
        raise ParseError(f"cannot read {path}: {e}", line=None) from e

    missing = [c for c in (date_column, symbol_column, close_column) if c not in frame.columns]
    if missing:
        raise ParseError(f"header lacks column(s) {', '.join(missing)}", line=1)

    frame = frame.fillna("")
    frame = frame[frame[symbol_column].str.strip().isin(set(tickers))]
    per_ticker: Dict[str, Dict[date, float]] = {t: {} for t in tickers}
    for idx, row in frame.iterrows():
        line = int(idx) + 2
        ticker = row[symbol_column].strip()
        try:
            day = parse_date(row[date_column])
        except ValueError as e:
            raise ParseError(f"bad date {row[date_column]!r}: {e}", line=line) from e
        try:
            close = float(row[close_column])
        except ValueError as e:
            raise ParseError(f"bad close {row[close_column]!r}", line=line) from e
        if not (np.isfinite(close) and close > 0.0):
            raise ParseError(f"close must be a positive number, got {row[close_column]!r}", line=line)
        if day in per_ticker[ticker]:
            raise ParseError(f"duplicate {ticker} row for {format_date(day)}", line=line)
        per_ticker[ticker][day] = close

    for ticker in tickers:
        if not per_ticker[ticker]:
            raise TickerNotFound(f"ticker {ticker!r} not found in {path}")

    common = set.intersection(*(set(days) for days in per_ticker.values()))
    dates = sorted(common)
    if len(dates) < min_rows:
        raise InsufficientData(
            f"only {len(dates)} common trading dates across {list(tickers)}, need {min_rows}"
        )

    dropped = {t: len(per_ticker[t]) - len(dates) for t in tickers}
    logger.info(
        f"Loaded {len(tickers)} tickers from {path}: {len(dates)} common dates "
        f"({format_date(dates[0])} to {format_date(dates[-1])}), dropped {dropped}"
    )
    return [
        PriceSeries(t, dates, np.array([per_ticker[t][d] for d in dates])) for t in tickers
    ]


def split_series(
    series: Sequence[PriceSeries],
    train_end: Union[str, date] = DEFAULT_TRAIN_END,
    test_start: Union[str, date] = DEFAULT_TEST_START,
) -> Tuple[List[PriceSeries], List[PriceSeries]]:
    """Split prices by date, before features are built, so no test price leaks into training."""
    train_end, test_start = parse_date(train_end), parse_date(test_start)
    if test_start <= train_end:
        raise InvalidParameter(
            f"test start {format_date(test_start)} must follow train end {format_date(train_end)}"
        )
    train = [s.between(end=train_end) for s in series]
    test = [s.between(start=test_start) for s in series]
    logger.info(
        f"Split at {format_date(train_end)} / {format_date(test_start)}: "
        f"{len(train[0]) if train else 0} train, {len(test[0]) if test else 0} test prices"
    )
    return train, test


def build_return_dataset(
    series: Sequence[PriceSeries],
    target: str,
    horizon: int = DEFAULT_HORIZON,
    short_lag: int = DEFAULT_SHORT_LAG,
    long_lag: int = DEFAULT_LONG_LAG,
    split: Split = Split.TRAIN,
) -> ReturnDataset:
    """Response and lagged-return covariates for one target stock.

    Row i uses prices up to index i for covariates and index i + horizon for
    the response; the first long_lag and last horizon rows are undefined and
    dropped.
    """
    if horizon < 1 or short_lag < 1 or long_lag < short_lag:
        raise InvalidParameter(
            f"need horizon >= 1 and 1 <= short_lag <= long_lag, got "
            f"horizon={horizon}, short_lag={short_lag}, long_lag={long_lag}"
        )
    by_ticker = {s.ticker: s for s in series}
    if target not in by_ticker:
        raise TickerNotFound(f"target {target!r} is not among {list(by_ticker)}")
    dates = series[0].dates
    if any(s.dates != dates for s in series):
        raise InvalidParameter("price series are not date-aligned")

    rows = np.arange(long_lag, len(dates) - horizon)
    p = 2 * len(series)
    if rows.size < max(p, 1):
        raise InsufficientData(
            f"{len(dates)} prices leave {max(rows.size, 0)} rows after dropping "
            f"{long_lag} head and {horizon} tail rows, need at least {p}"
        )

    columns, names = [], []
    for s in series:
        logs = np.log(s.closes)
        columns.append(logs[rows] - logs[rows - short_lag])
        columns.append(logs[rows] - logs[rows - long_lag])
        names.extend([f"{s.ticker}_short", f"{s.ticker}_long"])

    target_logs = np.log(by_ticker[target].closes)
    response = target_logs[rows + horizon] - target_logs[rows]
    return ReturnDataset(
        target_ticker=target,
        dataset=Dataset(np.column_stack(columns), response),
        covariate_names=tuple(names),
        split=Split(split),
        dates=tuple(dates[i] for i in rows),
    )


def residual_sums(model: Union[Coefficients, np.ndarray], test: ReturnDataset) -> Tuple[float, float]:
    """(sum of squared residuals, sum of squared responses) over the test rows."""
    beta = model.values if isinstance(model, Coefficients) else np.asarray(model, dtype=float)
    data = test.dataset
    if beta.shape != (data.p,):
        raise DimensionMismatch(f"coefficients have shape {beta.shape}, test design has {data.p} columns")
    residual = data.response - data.design @ beta
    return float(residual @ residual), float(data.response @ data.response)


def _pooled_r2(sse: float, ssy: float) -> float:
    if ssy == 0.0:
        raise DegenerateR2("test responses are all zero; r^2 is undefined")
    return 1.0 - sse / ssy


def evaluate_r2(model: Union[Coefficients, np.ndarray], test: ReturnDataset) -> float:
    """1 - SSE / sum(y^2): r^2 against the all-zero predictor; may be negative."""
    return _pooled_r2(*residual_sums(model, test))


@dataclass(frozen=True, eq=False)
class TargetFit:
    target: str
    sse: Dict[str, np.ndarray]
    ssy: float
    params: ShrinkageParams
    trace_check: float
    train_rows: int
    test_rows: int


@dataclass(frozen=True, eq=False)
class RealStudyResult:
    curve: pd.DataFrame
    targets: List[TargetFit]

    def peaks(self) -> Dict[str, Dict[str, float]]:
        """Best pooled r^2 and its lambda per method; ties go to the smaller lambda."""
        out = {}
        for method, group in self.curve.groupby("method", sort=False):
            best = group.sort_values(["r2", "lambda"], ascending=[False, True]).iloc[0]
            out[str(method)] = {"lambda": float(best["lambda"]), "r2": float(best["r2"])}
        return out

    def summary(self) -> dict:
        return {
            "peaks": self.peaks(),
            "targets": {
                fit.target: {
                    "kappa": fit.params.kappa,
                    "mu": fit.params.mu,
                    "trace_check": fit.trace_check,
                    "train_rows": fit.train_rows,
                    "test_rows": fit.test_rows,
                }
                for fit in self.targets
            },
        }


def _sse_curve(fits: Sequence[Coefficients], test: ReturnDataset) -> np.ndarray:
    return np.array([residual_sums(fit, test)[0] for fit in fits])


def run_real_study(
    series: Sequence[PriceSeries],
    lambda_grid: Sequence[float],
    bootstrap: BootstrapConfig,
    shrink_grid: Sequence[ShrinkageParams],
    train_end: Union[str, date] = DEFAULT_TRAIN_END,
    test_start: Union[str, date] = DEFAULT_TEST_START,
    targets: Optional[Sequence[str]] = None,
    metric: Metric = Metric.FROBENIUS,
    horizon: int = DEFAULT_HORIZON,
    short_lag: int = DEFAULT_SHORT_LAG,
    long_lag: int = DEFAULT_LONG_LAG,
    workers: int = 1,
) -> RealStudyResult:
    """Pooled out-of-sample r^2 along the lambda grid for each ridge variant.

    For every target: standard ridge; 2REG ridge with a block-bootstrap
    covariance whose (kappa, mu) are cross-validated over the bootstrap blocks;
    and 2REG ridge with the normalized but unshrunk bootstrap covariance.
    """
    lambda_grid = [float(lam) for lam in lambda_grid]
    if not lambda_grid or min(lambda_grid) < 0.0:
        raise InvalidParameter(f"lambda grid must be nonempty and nonnegative: {lambda_grid}")
    if not shrink_grid:
        raise InvalidParameter("shrinkage grid must be nonempty")

    targets = list(targets) if targets else [s.ticker for s in series]
    train_series, test_series = split_series(series, train_end, test_start)

    def fit_target(index: int) -> TargetFit:
        target = targets[index]
        kwargs = dict(horizon=horizon, short_lag=short_lag, long_lag=long_lag)
        train = build_return_dataset(train_series, target, split=Split.TRAIN, **kwargs)
        test = build_return_dataset(test_series, target, split=Split.TEST, **kwargs)
        boot = BootstrapConfig(
            bootstrap.iterations,
            bootstrap.blocks,
            derive_seed(bootstrap.seed, STAGE_BOOTSTRAP, index),
        )
        pipeline = covariance_pipeline(
            train.dataset,
            boot,
            CrudeEstimator.BOOTSTRAP,
            grid=shrink_grid,
            folds=FoldPlan.contiguous(train.n, bootstrap.blocks),
            metric=metric,
        )
        unregularized = normalize(pipeline.crude, train.dataset.design)
        trace_check = float(np.trace(train.dataset.gram @ pipeline.normalized.entries))

        sse = {
            STANDARD_RIDGE: _sse_curve(ridge_path(train.dataset, lambda_grid), test),
            TWOREG_RIDGE: _sse_curve(ridge_path(train.dataset, lambda_grid, pipeline.normalized), test),
            TWOREG_RIDGE_UNREGULARIZED: _sse_curve(
                ridge_path(train.dataset, lambda_grid, unregularized), test
            ),
        }
        ssy = float(test.dataset.response @ test.dataset.response)
        logger.info(
            f"{target}: {train.n} train / {test.n} test rows, kappa={pipeline.params.kappa}, "
            f"mu={pipeline.params.mu}, tr(X^T X C)={trace_check:.6g}"
        )
        return TargetFit(target, sse, ssy, pipeline.params, trace_check, train.n, test.n)

    fits = parallel_map(fit_target, range(len(targets)), workers)

    total_ssy = sum(fit.ssy for fit in fits)
    records = []
    for method in CURVE_METHODS:
        total_sse = np.sum([fit.sse[method] for fit in fits], axis=0)
        for lam, sse in zip(lambda_grid, total_sse):
            records.append({"method": method, "lambda": lam, "r2": _pooled_r2(float(sse), total_ssy)})

    curve = pd.DataFrame.from_records(records, columns=["method", "lambda", "r2"])
    result = RealStudyResult(curve, list(fits))
    for method, peak in result.peaks().items():
        logger.info(f"Peak pooled r^2 for {method}: {peak['r2']:.6f} at lambda={peak['lambda']:g}")
    return result
