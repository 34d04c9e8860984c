"""Monitoring and observability utilities."""

from shared.monitoring.logger import get_logger, setup_logging
from shared.monitoring.metrics import MetricsTracker

__all__ = [
    "MetricsTracker",
    "get_logger",
    "setup_logging",
]
