"""
Command-line entry point.

    python cli.py simulate --study autocorrelation --sigma2 10 --replicates 2000 --seed 7
    python cli.py cov --data data.csv --estimator hac --folds 20
    python cli.py realdata --prices all_stocks_5yr.csv
    python cli.py fit --data data.csv --estimator tworeg_ridge --lambda 10

Every option can also come from an INI file (--config) with one section per
command; keys are option names with underscores. Flags override the file,
the file overrides built-in defaults. The resolved options are written to
<output-dir>/config.ini so a run can be repeated from it.

Exit codes: 0 success, 2 invalid input, 3 data error, 4 numerical failure.
Failures print one JSON line {"error": ..., "message": ...} on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

import metrics
from config import Config
from covariance import (
    SHRINK_VALUES,
    BootstrapConfig,
    CrudeEstimator,
    FoldPlan,
    Metric,
    ShrinkageParams,
    covariance_pipeline,
    default_shrink_grid,
    read_matrix,
    write_matrix,
)
from errors import (
    ConfigurationError,
    DataFileNotFound,
    InvalidParameter,
    ParseError,
    TworegError,
)
from estimators import (
    CovarianceStage,
    Dataset,
    EstimatorKind,
    GaussianPrior,
    normal_tworeg_fit,
    ols_fit,
    ridge_fit,
    tworeg_ridge_fit,
)
from locks import locked_output_dir
from realdata import default_lambda_grid, load_prices, run_real_study
from simulation import DgpConfig, Method, Study, format_study_table, run_study, write_study_csv
from time_utils import audit_timestamp, parse_date

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1


def _configure_logging(level: Optional[str] = None):
    root_logger = logging.getLogger()
    if root_logger.handlers:
        if level:
            root_logger.setLevel(level.upper())
        return

    logging.basicConfig(
        level=(level or Config.LOG_LEVEL).upper(),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        stream=sys.stderr,
    )


# Value parsing


def parse_grid(text: str) -> List[float]:
    """Comma-separated numbers or log:<lo>:<hi>:<num> items (num points, log10-spaced)."""
    values: List[float] = []
    for item in (part.strip() for part in str(text).split(",")):
        if not item:
            continue
        if item.startswith("log:"):
            pieces = item.split(":")
            if len(pieces) != 4:
                raise InvalidParameter(f"grid item {item!r} must look like log:<lo>:<hi>:<num>")
            try:
                lo, hi, num = float(pieces[1]), float(pieces[2]), int(pieces[3])
            except ValueError as e:
                raise InvalidParameter(f"bad grid item {item!r}: {e}") from e
            if num < 1:
                raise InvalidParameter(f"grid item {item!r} needs at least one point")
            values.extend(float(v) for v in np.logspace(lo, hi, num))
        else:
            values.append(_float(item))
    if not values:
        raise InvalidParameter(f"empty grid {text!r}")
    return values


def _float(text: str) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError) as e:
        raise InvalidParameter(f"expected a number, got {text!r}") from e
    if not np.isfinite(value):
        raise InvalidParameter(f"expected a finite number, got {text!r}")
    return value


def _optional_float(text: str) -> Optional[float]:
    return None if str(text).strip() == "" else _float(text)


def _int(text: str) -> int:
    try:
        return int(str(text).strip())
    except ValueError as e:
        raise InvalidParameter(f"expected an integer, got {text!r}") from e


def _optional_int(text: str) -> Optional[int]:
    return None if str(text).strip() == "" else _int(text)


def _str(text: str) -> str:
    return str(text).strip()


def _str_list(text: str) -> List[str]:
    return [part.strip() for part in str(text).split(",") if part.strip()]


def _choice(enum_cls) -> Callable[[str], object]:
    def convert(text: str):
        try:
            return enum_cls(str(text).strip())
        except ValueError as e:
            allowed = ", ".join(m.value for m in enum_cls)
            raise InvalidParameter(f"{text!r} is not one of: {allowed}") from e

    return convert


def _choice_list(enum_cls) -> Callable[[str], list]:
    convert = _choice(enum_cls)
    return lambda text: [convert(item) for item in _str_list(text)]


def _date(text: str):
    try:
        return parse_date(text)
    except ValueError as e:
        raise InvalidParameter(f"bad date {text!r}: {e}") from e


@dataclass(frozen=True)
class Option:
    default: str
    convert: Callable[[str], object]
    help: str
    required: bool = False


_SHRINK_DEFAULT = ",".join(f"{v:g}" for v in SHRINK_VALUES)


def _common(output_dir: str) -> Dict[str, Option]:
    return {
        "output_dir": Option(output_dir, _str, "directory for results and audit files"),
        "workers": Option(str(Config.WORKERS), _int, "worker threads (results do not depend on it)"),
        "seed": Option("0", _int, "64-bit master seed"),
    }


COMMAND_OPTIONS: Dict[str, Dict[str, Option]] = {
    "simulate": {
        **_common(os.path.join("results", "simulate")),
        "study": Option(Study.AUTOCORRELATION.value, _choice(Study), "data-generating process"),
        "n": Option("2000", _int, "observations per replicate"),
        "p": Option("10", _int, "covariates"),
        "pi": Option("", _optional_float, "AR coefficient of covariate 1 (study default if empty)"),
        "rho": Option("", _optional_float, "AR coefficient of the noise"),
        "tau": Option("", _optional_float, "AR coefficient of the random effect"),
        "sigma2": Option("", _optional_float, "noise scale; noise variance is sigma2 * p"),
        "effect_var": Option("", _optional_float, "random-effect variance"),
        "replicates": Option("2000", _int, "Monte Carlo replicates (>= 2)"),
        "methods": Option(",".join(m.value for m in Method), _choice_list(Method), "methods to compare"),
        "lambda_grid": Option("0,log:-2:4:61", parse_grid, "ridge lambda grid"),
        "shrink_values": Option(_SHRINK_DEFAULT, parse_grid, "kappa and mu values (full product)"),
        "iterations": Option("2000", _int, "bootstrap iterations B"),
        "blocks": Option("20", _int, "bootstrap blocks"),
        "crude_estimator": Option(CrudeEstimator.BOOTSTRAP.value, _choice(CrudeEstimator), "crude covariance estimator"),
    },
    "cov": {
        **_common(os.path.join("results", "cov")),
        "data": Option("", _str, "dataset CSV", required=True),
        "response": Option("y", _str, "response column; all other columns are covariates"),
        "estimator": Option(CrudeEstimator.BOOTSTRAP.value, _choice(CrudeEstimator), "crude covariance estimator"),
        "iterations": Option("2000", _int, "bootstrap iterations B"),
        "blocks": Option("20", _int, "bootstrap blocks"),
        "folds": Option("", _optional_int, "HAC and cross-validation folds (default: blocks)"),
        "kappa": Option("", _optional_float, "fixed kappa (skips cross-validation)"),
        "mu": Option("", _optional_float, "fixed mu (skips cross-validation)"),
        "shrink_values": Option(_SHRINK_DEFAULT, parse_grid, "kappa and mu values searched"),
        "metric": Option(Metric.FROBENIUS.value, _choice(Metric), "cross-validation distance"),
    },
    "realdata": {
        **_common(os.path.join("results", "realdata")),
        "prices": Option("", _str, "daily price CSV", required=True),
        "tickers": Option("MSFT,AAPL,FB,GOOGL,AMZN", _str_list, "stocks used as covariates and targets"),
        "date_column": Option(Config.PRICE_DATE_COLUMN, _str, "date column name"),
        "symbol_column": Option(Config.PRICE_SYMBOL_COLUMN, _str, "ticker column name"),
        "close_column": Option(Config.PRICE_CLOSE_COLUMN, _str, "closing price column name"),
        "train_end": Option("2016-12-30", _date, "last training date"),
        "test_start": Option("2017-01-03", _date, "first test date"),
        "horizon": Option("10", _int, "response horizon in trading days"),
        "short_lag": Option("1", _int, "short return lag"),
        "long_lag": Option("5", _int, "long return lag"),
        "lambda_grid": Option("0,log:0:6:25", parse_grid, "ridge lambda grid"),
        "shrink_values": Option(_SHRINK_DEFAULT, parse_grid, "kappa and mu values searched"),
        "iterations": Option("2000", _int, "bootstrap iterations B"),
        "blocks": Option("10", _int, "bootstrap blocks, also the cross-validation folds"),
        "metric": Option(Metric.FROBENIUS.value, _choice(Metric), "cross-validation distance"),
    },
    "fit": {
        **_common(os.path.join("results", "fit")),
        "data": Option("", _str, "dataset CSV", required=True),
        "response": Option("y", _str, "response column; all other columns are covariates"),
        "estimator": Option(EstimatorKind.OLS.value, _choice(EstimatorKind), "estimator"),
        "lambda": Option("0", _float, "penalty (ridge) or prior precision (normal 2REG)"),
        "cov": Option("", _str, "covariance matrix file; estimated when empty"),
        "crude_estimator": Option(CrudeEstimator.BOOTSTRAP.value, _choice(CrudeEstimator), "crude covariance estimator"),
        "iterations": Option("2000", _int, "bootstrap iterations B"),
        "blocks": Option("20", _int, "bootstrap blocks"),
        "kappa": Option("", _optional_float, "fixed kappa (skips cross-validation)"),
        "mu": Option("", _optional_float, "fixed mu (skips cross-validation)"),
        "shrink_values": Option(_SHRINK_DEFAULT, parse_grid, "kappa and mu values searched"),
        "metric": Option(Metric.FROBENIUS.value, _choice(Metric), "cross-validation distance"),
    },
}


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidParameter(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="tworeg", description="Two-stage regularized ridge regression")
    parser.add_argument("--log-level", default=None, help="logging level (default: $LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    for command, options in COMMAND_OPTIONS.items():
        cmd = sub.add_parser(command)
        cmd.add_argument("--config", default=None, help="INI file with a [%s] section" % command)
        for key, option in options.items():
            cmd.add_argument(
                "--" + key.replace("_", "-"),
                dest=key,
                default=None,
                help=f"{option.help} (default: {option.default or 'none'})",
            )
    return parser


def _read_config_file(path: str, command: str) -> Dict[str, str]:
    if not os.path.exists(path):
        raise DataFileNotFound(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigurationError(f"cannot parse {path}: {e}") from e

    unknown_sections = [s for s in parser.sections() if s not in COMMAND_OPTIONS]
    if unknown_sections:
        raise ConfigurationError(f"{path}: unknown section(s) {unknown_sections}")
    if not parser.has_section(command):
        return {}

    section = dict(parser[command])
    unknown = sorted(set(section) - set(COMMAND_OPTIONS[command]))
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) in [{command}]: {', '.join(unknown)}")
    return section


def resolve_options(command: str, args: argparse.Namespace):
    """(raw strings, converted values) after defaults < file < flags."""
    options = COMMAND_OPTIONS[command]
    raw = {key: option.default for key, option in options.items()}
    if args.config:
        raw.update(_read_config_file(args.config, command))
    for key in options:
        flag = getattr(args, key, None)
        if flag is not None:
            raw[key] = flag

    values = {}
    for key, option in options.items():
        if option.required and not str(raw[key]).strip():
            raise InvalidParameter(f"--{key.replace('_', '-')} is required")
        try:
            values[key] = option.convert(raw[key])
        except InvalidParameter as e:
            raise InvalidParameter(f"--{key.replace('_', '-')}: {e}") from e
    if values["workers"] < 1:
        raise InvalidParameter(f"--workers must be >= 1, got {values['workers']}")
    return raw, values


def _write_config(path: str, command: str, raw: Dict[str, str]) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser[command] = {key: str(value) for key, value in raw.items()}
    with open(path, "w") as f:
        parser.write(f)


def _write_json(path: str, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote {path}")


def load_dataset(path: str, response: str = "y") -> Dataset:
    """Numeric CSV with a header; `response` is y, every other column a covariate."""
    if not os.path.exists(path):
        raise DataFileNotFound(f"dataset file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    if response not in frame.columns:
        raise ParseError(f"response column {response!r} missing from header", line=1)

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1).to_numpy()
    if bad.any():
        first = int(np.argmax(bad))
        raise ParseError(f"non-numeric or missing value in {path}", line=first + 2)

    covariates = [c for c in frame.columns if c != response]
    logger.info(f"Loaded {path}: {len(frame)} rows, {len(covariates)} covariates")
    return Dataset(numeric[covariates].to_numpy(dtype=float), numeric[response].to_numpy(dtype=float))


def _shrink_grid(values: Sequence[float]) -> List[ShrinkageParams]:
    return default_shrink_grid(sorted(set(values)))


def _fixed_params(opts: dict) -> Optional[ShrinkageParams]:
    if opts["kappa"] is None and opts["mu"] is None:
        return None
    return ShrinkageParams(opts["kappa"] or 0.0, opts["mu"] or 0.0)


# Commands


def cmd_simulate(opts: dict) -> None:
    cfg = DgpConfig.for_study(
        opts["study"],
        n=opts["n"],
        p=opts["p"],
        pi=opts["pi"],
        rho=opts["rho"],
        tau=opts["tau"],
        sigma2=opts["sigma2"],
        effect_var=opts["effect_var"],
        seed=opts["seed"],
    )
    results = run_study(
        cfg,
        opts["methods"],
        opts["lambda_grid"],
        _shrink_grid(opts["shrink_values"]),
        opts["replicates"],
        BootstrapConfig(opts["iterations"], opts["blocks"], opts["seed"]),
        workers=opts["workers"],
        crude_estimator=opts["crude_estimator"],
    )

    out = opts["output_dir"]
    write_study_csv(results, os.path.join(out, "results.csv"))
    with open(os.path.join(out, "table.txt"), "w") as f:
        f.write(f"{cfg.study.value}: n={cfg.n} p={cfg.p} pi={cfg.pi:g} rho={cfg.rho:g} "
                f"tau={cfg.tau:g} sigma2={cfg.sigma2:g} var(b)={cfg.effect_var:g} "
                f"replicates={opts['replicates']}\n\n")
        f.write("Squared estimation error: mean (standard error) at the best lambda\n")
        f.write(format_study_table(results, "error") + "\n\n")
        f.write("Mean beta_1^2 (mean sum of beta_j^2) at the best lambda\n")
        f.write(format_study_table(results, "beta1") + "\n")


def cmd_cov(opts: dict) -> None:
    data = load_dataset(opts["data"], opts["response"])
    cfg = BootstrapConfig(opts["iterations"], opts["blocks"], opts["seed"])
    folds = FoldPlan.contiguous(data.n, opts["folds"] or opts["blocks"])
    params = _fixed_params(opts)
    result = covariance_pipeline(
        data,
        cfg,
        opts["estimator"],
        params=params,
        grid=_shrink_grid(opts["shrink_values"]),
        folds=folds,
        metric=opts["metric"],
        workers=opts["workers"],
    )

    out = opts["output_dir"]
    for name in ("crude", "prior", "shrunk", "normalized"):
        write_matrix(os.path.join(out, f"{name}.txt"), getattr(result, name))
    _write_json(
        os.path.join(out, "selection.json"),
        {
            "kappa": result.params.kappa,
            "mu": result.params.mu,
            "cross_validated": params is None,
            "estimator": opts["estimator"].value,
            "metric": opts["metric"].value,
            "folds": len(folds),
            "trace_check": float(np.trace(data.gram @ result.normalized.entries)),
        },
    )


def cmd_realdata(opts: dict) -> None:
    series = load_prices(
        opts["prices"],
        opts["tickers"],
        date_column=opts["date_column"],
        symbol_column=opts["symbol_column"],
        close_column=opts["close_column"],
    )
    result = run_real_study(
        series,
        opts["lambda_grid"] or default_lambda_grid(),
        BootstrapConfig(opts["iterations"], opts["blocks"], opts["seed"]),
        _shrink_grid(opts["shrink_values"]),
        train_end=opts["train_end"],
        test_start=opts["test_start"],
        metric=opts["metric"],
        horizon=opts["horizon"],
        short_lag=opts["short_lag"],
        long_lag=opts["long_lag"],
        workers=opts["workers"],
    )

    out = opts["output_dir"]
    result.curve.to_csv(os.path.join(out, "curve.csv"), index=False)
    logger.info(f"Wrote {os.path.join(out, 'curve.csv')}")
    _write_json(os.path.join(out, "summary.json"), result.summary())


def cmd_fit(opts: dict) -> None:
    data = load_dataset(opts["data"], opts["response"])
    kind: EstimatorKind = opts["estimator"]
    lam = opts["lambda"]
    kappa = mu = None

    if kind == EstimatorKind.OLS:
        coefficients = ols_fit(data)
    elif kind == EstimatorKind.STANDARD_RIDGE:
        coefficients = ridge_fit(data, lam)
    else:
        if opts["cov"]:
            cov = read_matrix(opts["cov"], CovarianceStage.NORMALIZED)
        else:
            pipeline = covariance_pipeline(
                data,
                BootstrapConfig(opts["iterations"], opts["blocks"], opts["seed"]),
                opts["crude_estimator"],
                params=_fixed_params(opts),
                grid=_shrink_grid(opts["shrink_values"]),
                metric=opts["metric"],
                workers=opts["workers"],
            )
            cov = pipeline.normalized
            kappa, mu = pipeline.params.kappa, pipeline.params.mu
        if kind == EstimatorKind.TWOREG_RIDGE:
            coefficients = tworeg_ridge_fit(data, cov, lam, kappa, mu)
        else:
            coefficients = normal_tworeg_fit(ols_fit(data), cov, GaussianPrior(lam))

    payload = coefficients.to_dict()
    payload.update({"kappa": kappa, "mu": mu, "seed": opts["seed"]})
    _write_json(os.path.join(opts["output_dir"], "coefficients.json"), payload)


COMMANDS: Dict[str, Callable[[dict], None]] = {
    "simulate": cmd_simulate,
    "cov": cmd_cov,
    "realdata": cmd_realdata,
    "fit": cmd_fit,
}


def _emit_error(error: BaseException) -> None:
    record = {"error": type(error).__name__, "message": str(error).replace("\n", " ")}
    print(json.dumps(record), file=sys.stderr)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.log_level)
    Config.validate()

    command = args.command
    raw, opts = resolve_options(command, args)
    out = opts["output_dir"]

    with locked_output_dir(out):
        started = time.monotonic()
        with metrics.command_duration.labels(command).time():
            COMMANDS[command](opts)
        _write_config(os.path.join(out, "config.ini"), command, raw)
        _write_json(
            os.path.join(out, "run.json"),
            {
                "command": command,
                "argv": list(argv) if argv is not None else sys.argv[1:],
                "version": Config.APP_VERSION,
                "revision": Config.APP_REVISION,
                "finished_at": audit_timestamp(Config.TIMEZONE),
                "duration_seconds": round(time.monotonic() - started, 3),
            },
        )
        metrics.write_metrics(os.path.join(out, "metrics.prom"))

    logger.info(f"{command} finished; outputs in {out}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        return run(argv)
    except TworegError as e:
        logger.debug("Command failed", exc_info=True)
        _emit_error(e)
        return e.exit_code
    except FileNotFoundError as e:
        _emit_error(DataFileNotFound(str(e)))
        return DataFileNotFound.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        _emit_error(e)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
