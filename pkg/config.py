import os
import sys

from errors import ConfigurationError


def _env_bool(name: str, default: str = "0") -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


class Config:
    # Build metadata (injected by CI when available)
    APP_VERSION = os.getenv("APP_VERSION", "dev")
    APP_REVISION = os.getenv("APP_REVISION", "unknown")

    # Default worker count for bootstrap replicates, CV folds and study replicates.
    # Results do not depend on this value.
    WORKERS = int(os.getenv("TWOREG_WORKERS", "1"))

    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

    # Cross-checks tworeg_ridge_fit against the (I + lambda*C)^-1 form
    DEBUG_CHECKS = _env_bool("TWOREG_DEBUG_CHECKS")

    # Audit timestamps only
    TIMEZONE = os.getenv("TZ", os.getenv("TIMEZONE", "UTC"))

    # Numerical tolerances
    RANK_TOLERANCE = 1e-10  # relative to the largest singular value
    PSD_TOLERANCE = 1e-10  # relative to the trace
    ASYMMETRY_TOLERANCE = 1e-8  # relative Frobenius asymmetry
    JITTER_FACTOR = 1e-12  # jitter = JITTER_FACTOR * trace / p
    TWO_FORM_TOLERANCE = 1e-8
    ARGMIN_CHECK_TOLERANCE = 1e-6
    REDRAW_FACTOR = 10  # at most REDRAW_FACTOR * B bootstrap redraws

    # Real-data defaults
    PRICE_DATE_COLUMN = os.getenv("PRICE_DATE_COLUMN", "date")
    PRICE_SYMBOL_COLUMN = os.getenv("PRICE_SYMBOL_COLUMN", "symbol")
    PRICE_CLOSE_COLUMN = os.getenv("PRICE_CLOSE_COLUMN", "close")
    MIN_ALIGNED_ROWS = 30

    @classmethod
    def validate(cls):
        """Validate environment-derived configuration"""
        errors = []

        if cls.WORKERS < 1:
            errors.append(f"TWOREG_WORKERS must be >= 1, got {cls.WORKERS}")

        if cls.LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            errors.append(f"LOG_LEVEL {cls.LOG_LEVEL!r} is not a logging level")

        if errors:
            for error in errors:
                print(f"  ✗ {error}", file=sys.stderr)
            raise ConfigurationError("; ".join(errors))
