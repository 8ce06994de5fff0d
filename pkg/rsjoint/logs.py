"""Console and rotating-file logging, controlled by ``RSJOINT_LOG_*`` variables."""

import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import List, Optional

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def default_log_file() -> str:
    return os.getenv("RSJOINT_LOG_FILE", str(Path.home() / ".cache" / "rsjoint" / "rsjoint.log"))


def default_log_level() -> int:
    return getattr(logging, os.getenv("RSJOINT_LOG_LEVEL", "INFO").upper(), logging.INFO)


def configure_logging(log_level: int = logging.INFO, log_file: Optional[str] = None) -> None:
    """Configure console and optional file logging."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(RotatingFileHandler(log_file, maxBytes=1_000_000, backupCount=3))
    logging.basicConfig(level=log_level, format=LOG_FORMAT, handlers=handlers, force=True)


THREAD_VARIABLES = ("GERSP_THREADS", "RSJOINT_THREADS")


def worker_count() -> int:
    """Worker parallelism cap from ``GERSP_THREADS`` or its ``RSJOINT_THREADS`` alias (default: core count)."""
    for name in THREAD_VARIABLES:
        raw = os.getenv(name)
        if not raw:
            continue
        try:
            return max(1, int(raw))
        except ValueError:
            logging.getLogger(__name__).warning("Ignoring non-integer %s=%r", name, raw)
    return os.cpu_count() or 1
