"""
End-to-end tests for the command line.

Runs `cli.main` in-process against temporary directories and checks the
files each command leaves behind, the config-file precedence, determinism
across worker counts and the exit-code / error-record contract.
"""

import configparser
import json
import os
import sys

import numpy as np
import pandas as pd
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from cli import load_dataset, main, parse_grid
from covariance import FoldPlan, cv_hac_cov, read_matrix
from errors import InvalidParameter, ParseError
from estimators import CovarianceStage, tworeg_ridge_fit
from locks import OutputDirLock
from tests.fixtures.synthetic_data import (
    RECOVERY_BETA,
    TEST_TICKERS,
    get_noisy_dataset,
    get_recovery_dataset,
    random_spd,
    write_dataset_csv,
    write_price_csv,
)

SIDECARS = ("config.ini", "run.json", "metrics.prom")


def _error_record(capsys):
    for line in reversed(capsys.readouterr().err.splitlines()):
        if line.startswith('{"error"'):
            return json.loads(line)
    raise AssertionError("no error record on stderr")


def _read_json(path):
    with open(path) as f:
        return json.load(f)


@pytest.fixture
def recovery_csv(tmp_path):
    design, response = get_recovery_dataset()
    return write_dataset_csv(str(tmp_path / "recovery.csv"), design, response)


@pytest.fixture
def noisy_csv(tmp_path):
    design, response, _ = get_noisy_dataset(n=200, p=3, seed=6)
    return write_dataset_csv(str(tmp_path / "noisy.csv"), design, response)


class TestGridSyntax:
    """Lambda and shrinkage grid parsing"""

    def test_numbers_and_log_ranges(self):
        assert parse_grid("0, 0.5") == [0.0, 0.5]
        np.testing.assert_allclose(parse_grid("0,log:0:2:3"), [0.0, 1.0, 10.0, 100.0])

    def test_bad_items(self):
        for text in ("", "abc", "log:0:2", "log:0:2:0", "inf"):
            with pytest.raises(InvalidParameter):
                parse_grid(text)


class TestDatasetFile:
    """Dataset CSV for cov and fit"""

    def test_response_column_is_separated(self, recovery_csv):
        data = load_dataset(recovery_csv)
        assert data.p == len(RECOVERY_BETA)

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,y\n1,2\n3,oops\n5,6\n")
        with pytest.raises(ParseError) as excinfo:
            load_dataset(str(path))
        assert excinfo.value.line == 3

    def test_missing_response_column(self, recovery_csv):
        with pytest.raises(ParseError):
            load_dataset(recovery_csv, response="target")


class TestFitCommand:
    """`fit` writes coefficients with their metadata"""

    def test_ols_recovers_coefficients(self, recovery_csv, tmp_path):
        out = tmp_path / "fit"
        assert main(["fit", "--data", recovery_csv, "--output-dir", str(out)]) == 0
        payload = _read_json(out / "coefficients.json")
        assert payload["estimator_kind"] == "ols"
        np.testing.assert_allclose(payload["values"], RECOVERY_BETA, rtol=1e-10)
        for name in SIDECARS:
            assert (out / name).exists()
        assert not (out / ".lock").exists()

    def test_negative_ridge_penalty(self, recovery_csv, tmp_path, capsys):
        code = main(["fit", "--data", recovery_csv, "--estimator", "standard_ridge",
                     "--lambda", "-1", "--output-dir", str(tmp_path / "fit")])
        assert code == 2
        assert _error_record(capsys)["error"] == "InvalidPenalty"

    def test_tworeg_with_covariance_file(self, noisy_csv, tmp_path):
        cov_path = tmp_path / "cov.txt"
        np.savetxt(cov_path, random_spd(3, seed=2) / 100.0, fmt="%.17g")
        out = tmp_path / "fit"
        code = main(["fit", "--data", noisy_csv, "--estimator", "tworeg_ridge", "--lambda", "4",
                     "--cov", str(cov_path), "--output-dir", str(out)])
        assert code == 0
        expected = tworeg_ridge_fit(
            load_dataset(noisy_csv), read_matrix(str(cov_path), CovarianceStage.NORMALIZED), 4.0
        )
        np.testing.assert_allclose(_read_json(out / "coefficients.json")["values"], expected.values, rtol=1e-12)

    def test_tworeg_estimates_covariance(self, noisy_csv, tmp_path):
        out = tmp_path / "fit"
        code = main(["fit", "--data", noisy_csv, "--estimator", "normal_tworeg", "--lambda", "1",
                     "--iterations", "50", "--blocks", "5", "--shrink-values", "0,1",
                     "--seed", "3", "--output-dir", str(out)])
        assert code == 0
        payload = _read_json(out / "coefficients.json")
        assert payload["kappa"] in (0.0, 1.0)
        assert payload["seed"] == 3

    def test_missing_data_file(self, tmp_path, capsys):
        code = main(["fit", "--data", str(tmp_path / "absent.csv"), "--output-dir", str(tmp_path / "fit")])
        assert code == 3
        assert _error_record(capsys)["error"] == "DataFileNotFound"

    def test_data_is_required(self, tmp_path, capsys):
        assert main(["fit", "--output-dir", str(tmp_path / "fit")]) == 2
        assert "--data" in _error_record(capsys)["message"]


class TestConfigFiles:
    """defaults < config file < flags"""

    def _write_ini(self, path, text):
        path.write_text(text)
        return str(path)

    def test_flags_override_file(self, recovery_csv, tmp_path):
        ini = self._write_ini(tmp_path / "run.ini",
                              f"[fit]\ndata = {recovery_csv}\nestimator = standard_ridge\nlambda = 5\n")
        out = tmp_path / "fit"
        assert main(["fit", "--config", ini, "--lambda", "2", "--output-dir", str(out)]) == 0
        payload = _read_json(out / "coefficients.json")
        assert payload["estimator_kind"] == "standard_ridge"
        assert payload["lambda"] == 2.0

    def test_unknown_key(self, recovery_csv, tmp_path, capsys):
        ini = self._write_ini(tmp_path / "run.ini", f"[fit]\ndata = {recovery_csv}\nlambada = 5\n")
        assert main(["fit", "--config", ini, "--output-dir", str(tmp_path / "fit")]) == 2
        assert _error_record(capsys)["error"] == "ConfigurationError"

    def test_unknown_section(self, recovery_csv, tmp_path):
        ini = self._write_ini(tmp_path / "run.ini", f"[fitting]\ndata = {recovery_csv}\n")
        assert main(["fit", "--config", ini, "--data", recovery_csv,
                     "--output-dir", str(tmp_path / "fit")]) == 2

    def test_resolved_config_reproduces_run(self, recovery_csv, tmp_path):
        first = tmp_path / "first"
        assert main(["fit", "--data", recovery_csv, "--estimator", "standard_ridge",
                     "--lambda", "3", "--output-dir", str(first)]) == 0
        resolved = configparser.ConfigParser(interpolation=None)
        resolved.read(first / "config.ini")
        assert resolved["fit"]["lambda"] == "3"

        second = tmp_path / "second"
        assert main(["fit", "--config", str(first / "config.ini"), "--output-dir", str(second)]) == 0
        assert (first / "coefficients.json").read_bytes() == (second / "coefficients.json").read_bytes()


class TestCovCommand:
    """`cov` writes every pipeline stage and the selection"""

    def test_full_shrinkage_writes_prior(self, noisy_csv, tmp_path):
        out = tmp_path / "cov"
        code = main(["cov", "--data", noisy_csv, "--kappa", "1", "--iterations", "100",
                     "--blocks", "10", "--output-dir", str(out)])
        assert code == 0
        np.testing.assert_allclose(
            read_matrix(str(out / "shrunk.txt")).entries, read_matrix(str(out / "prior.txt")).entries
        )
        selection = _read_json(out / "selection.json")
        assert selection["kappa"] == 1.0
        assert selection["cross_validated"] is False
        assert selection["trace_check"] == pytest.approx(3.0, rel=1e-10)

    def test_hac_estimator(self, noisy_csv, tmp_path):
        out = tmp_path / "cov"
        code = main(["cov", "--data", noisy_csv, "--estimator", "hac", "--folds", "20",
                     "--kappa", "0", "--mu", "0", "--output-dir", str(out)])
        assert code == 0
        data = load_dataset(noisy_csv)
        expected = cv_hac_cov(data, FoldPlan.contiguous(data.n, 20))
        np.testing.assert_allclose(read_matrix(str(out / "crude.txt")).entries, expected.entries, rtol=1e-12)

    def test_cross_validated_selection(self, noisy_csv, tmp_path):
        out = tmp_path / "cov"
        code = main(["cov", "--data", noisy_csv, "--iterations", "50", "--blocks", "5",
                     "--shrink-values", "0,0.5,1", "--metric", "gaussian_kl", "--output-dir", str(out)])
        assert code == 0
        selection = _read_json(out / "selection.json")
        assert selection["cross_validated"] is True
        assert selection["kappa"] in (0.0, 0.5, 1.0)

    def test_worker_count_does_not_change_outputs(self, noisy_csv, tmp_path):
        args = ["cov", "--data", noisy_csv, "--iterations", "60", "--blocks", "5",
                "--shrink-values", "0,0.5,1"]
        serial, threaded = tmp_path / "serial", tmp_path / "threaded"
        assert main(args + ["--output-dir", str(serial)]) == 0
        assert main(args + ["--workers", "3", "--output-dir", str(threaded)]) == 0
        for name in ("crude.txt", "prior.txt", "shrunk.txt", "normalized.txt", "selection.json"):
            assert (serial / name).read_bytes() == (threaded / name).read_bytes()


class TestSimulateCommand:
    """`simulate` writes the raw CSV and the tables"""

    ARGS = ["simulate", "--n", "100", "--p", "2", "--replicates", "3", "--iterations", "10",
            "--blocks", "5", "--lambda-grid", "0,1,10", "--shrink-values", "0,1", "--seed", "7"]

    def test_outputs_and_worker_invariance(self, tmp_path):
        serial, threaded = tmp_path / "serial", tmp_path / "threaded"
        assert main(self.ARGS + ["--output-dir", str(serial)]) == 0
        assert main(self.ARGS + ["--workers", "3", "--output-dir", str(threaded)]) == 0
        assert (serial / "results.csv").read_bytes() == (threaded / "results.csv").read_bytes()
        table = (serial / "table.txt").read_text()
        assert "Squared estimation error" in table
        assert "OLS" in table
        assert len(pd.read_csv(serial / "results.csv")) == 1 + 3 + 4 * 3 + 3

    def test_one_replicate_is_rejected(self, tmp_path, capsys):
        assert main(["simulate", "--replicates", "1", "--output-dir", str(tmp_path / "sim")]) == 2
        assert _error_record(capsys)["error"] == "InvalidParameter"

    def test_unknown_study(self, tmp_path):
        assert main(["simulate", "--study", "bogus", "--output-dir", str(tmp_path / "sim")]) == 2


class TestRealdataCommand:
    """`realdata` writes the r^2 curve and its summary"""

    def test_single_zero_lambda(self, tmp_path):
        prices = write_price_csv(str(tmp_path / "prices.csv"), count=300)
        out = tmp_path / "real"
        code = main(["realdata", "--prices", prices, "--tickers", ",".join(TEST_TICKERS),
                     "--train-end", "2015-11-30", "--test-start", "2015-12-01",
                     "--lambda-grid", "0", "--iterations", "30", "--blocks", "4",
                     "--shrink-values", "0,1", "--output-dir", str(out)])
        assert code == 0
        curve = pd.read_csv(out / "curve.csv")
        assert len(curve) == 3
        assert curve["r2"].nunique() == 1
        summary = _read_json(out / "summary.json")
        assert set(summary["targets"]) == set(TEST_TICKERS)

    def test_worker_count_does_not_change_curve(self, tmp_path):
        prices = write_price_csv(str(tmp_path / "prices.csv"), count=300)
        args = ["realdata", "--prices", prices, "--tickers", ",".join(TEST_TICKERS),
                "--train-end", "2015-11-30", "--test-start", "2015-12-01",
                "--lambda-grid", "0,1,10", "--iterations", "30", "--blocks", "4",
                "--shrink-values", "0,1"]
        serial, threaded = tmp_path / "serial", tmp_path / "threaded"
        assert main(args + ["--output-dir", str(serial)]) == 0
        assert main(args + ["--workers", "3", "--output-dir", str(threaded)]) == 0
        assert (serial / "curve.csv").read_bytes() == (threaded / "curve.csv").read_bytes()
        assert (serial / "summary.json").read_bytes() == (threaded / "summary.json").read_bytes()

    def test_missing_price_file(self, tmp_path, capsys):
        code = main(["realdata", "--prices", str(tmp_path / "absent.csv"),
                     "--output-dir", str(tmp_path / "real")])
        assert code == 3
        assert "absent.csv" in _error_record(capsys)["message"]


class TestOutputDirectoryLock:
    """Concurrent runs cannot share an output directory"""

    def test_busy_directory(self, recovery_csv, tmp_path, capsys):
        out = tmp_path / "busy"
        lock = OutputDirLock(str(out))
        assert lock.acquire()
        try:
            assert main(["fit", "--data", recovery_csv, "--output-dir", str(out)]) == 2
            assert _error_record(capsys)["error"] == "OutputDirectoryBusy"
        finally:
            lock.release()
