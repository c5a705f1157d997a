"""
Deterministic data builders for the test suite.

Everything here is seeded, so a test that uses the same builder twice sees
the same numbers.
"""

from datetime import date, timedelta

import numpy as np
import pandas as pd

# Noiseless recovery system: y = X beta exactly
RECOVERY_BETA = np.array([1.5, -2.0, 0.25, 3.0])

TEST_TICKERS = ["AAA", "BBB", "CCC"]


def get_recovery_dataset(n=40, seed=11):
    """Design with independent normal columns and y = X @ RECOVERY_BETA."""
    rng = np.random.default_rng(seed)
    design = rng.standard_normal((n, RECOVERY_BETA.shape[0]))
    return design, design @ RECOVERY_BETA


def get_noisy_dataset(n=200, p=4, noise=0.5, seed=3):
    """(design, response, beta) with Gaussian noise."""
    rng = np.random.default_rng(seed)
    design = rng.standard_normal((n, p))
    beta = rng.standard_normal(p)
    response = design @ beta + noise * rng.standard_normal(n)
    return design, response, beta


def random_spd(p, seed=0, condition=None):
    """Random symmetric positive definite matrix.

    With `condition`, eigenvalues are log-spaced between 1 and `condition`.
    """
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((p, p)))
    if condition is None:
        eigenvalues = rng.uniform(0.5, 3.0, size=p)
    else:
        eigenvalues = np.logspace(0.0, np.log10(condition), p)
    matrix = (basis * eigenvalues) @ basis.T
    return (matrix + matrix.T) / 2.0


def trading_days(start=date(2015, 1, 5), count=60):
    """Weekdays from `start`."""
    days = []
    current = start
    while len(days) < count:
        if current.weekday() < 5:
            days.append(current)
        current += timedelta(days=1)
    return days


def random_walk_closes(count, seed=0, start=100.0, scale=0.02):
    rng = np.random.default_rng(seed)
    return start * np.exp(np.cumsum(scale * rng.standard_normal(count)))


def get_price_frame(tickers=TEST_TICKERS, count=60, seed=5, start=date(2015, 1, 5)):
    """Long-format price table with columns date, symbol, close."""
    days = trading_days(start, count)
    rows = []
    for k, ticker in enumerate(tickers):
        closes = random_walk_closes(count, seed=seed + k)
        for day, close in zip(days, closes):
            rows.append({"date": day.isoformat(), "symbol": ticker, "close": repr(float(close))})
    return pd.DataFrame(rows, columns=["date", "symbol", "close"])


def write_price_csv(path, frame=None, **kwargs):
    frame = get_price_frame(**kwargs) if frame is None else frame
    frame.to_csv(path, index=False)
    return path


def write_dataset_csv(path, design, response, response_column="y"):
    columns = {f"x{j + 1}": design[:, j] for j in range(design.shape[1])}
    columns[response_column] = response
    pd.DataFrame(columns).to_csv(path, index=False)
    return path
