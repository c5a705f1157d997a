import logging

from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile

logger = logging.getLogger(__name__)

registry = CollectorRegistry()

bootstrap_replicates = Counter(
    "tworeg_bootstrap_replicates",
    "Bootstrap replicates fitted",
    registry=registry,
)
bootstrap_redraws = Counter(
    "tworeg_bootstrap_redraws",
    "Bootstrap resamples redrawn because the design was rank deficient",
    registry=registry,
)
psd_clamps = Counter(
    "tworeg_psd_clamps",
    "Covariance matrices with slightly negative eigenvalues clamped to zero",
    registry=registry,
)
jitter_applied = Counter(
    "tworeg_jitter_applied",
    "Factorizations retried with diagonal jitter",
    ["operation"],
    registry=registry,
)
study_replicates = Counter(
    "tworeg_study_replicates",
    "Simulation study replicates completed",
    ["study"],
    registry=registry,
)
command_duration = Histogram(
    "tworeg_command_duration_seconds",
    "CLI command duration",
    ["command"],
    buckets=(1, 5, 15, 60, 300, 900, 3600, float("inf")),
    registry=registry,
)


def write_metrics(path: str) -> None:
    """Dump the registry in the Prometheus text format."""
    try:
        write_to_textfile(path, registry)
    except OSError as e:
        logger.warning(f"Failed to write metrics to {path}: {e}")
