"""
Logging Configuration
=====================

dictConfig setup shared by the CLI and the demo script, plus per-run log
files for training.

- Console handler, optional rotating file handler, one line format
- Python warnings (numpy overflow / invalid-value warnings from the
  renderer and the optimizer) are captured into the `py.warnings` logger
- `run_log(directory)` mirrors every `app.*` record into
  `<directory>/run.log` while a training run is active, so the log sits
  next to its checkpoints and CSV history
"""

import logging
import logging.config
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Union

LINE_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
RUN_LOG_NAME = "run.log"
PACKAGE_LOGGER = "app"


def configure_logging(
    log_level: str = "INFO",
    log_file: str = "specsplat.log",
    enable_file: bool = False,
) -> None:
    """
    Configure process-wide logging.

    Args:
        log_level: Minimum level for handlers (DEBUG/INFO/WARNING/ERROR)
        log_file: Path of the rotating log file
        enable_file: Whether to add the file handler
    """
    handlers = ["console"] + (["file"] if enable_file else [])

    logging_config = {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "line": {"format": LINE_FORMAT, "datefmt": DATE_FORMAT},
        },
        "handlers": {
            "console": {
                "class": "logging.StreamHandler",
                "level": log_level,
                "formatter": "line",
            },
            "file": {
                "class": "logging.handlers.RotatingFileHandler",
                "level": log_level,
                "formatter": "line",
                "filename": log_file,
                "maxBytes": 10 * 1024 * 1024,
                "backupCount": 2,
                "encoding": "utf-8",
            },
        },
        "loggers": {
            "py.warnings": {"level": "WARNING"},
        },
        "root": {
            "level": log_level,
            "handlers": handlers,
        },
    }

    logging.config.dictConfig(logging_config)
    logging.captureWarnings(True)


@contextmanager
def run_log(directory: Union[str, Path]) -> Iterator[Path]:
    """
    Copy package log records into `<directory>/run.log` for the duration
    of the block. Yields the log path.
    """
    path = Path(directory) / RUN_LOG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LINE_FORMAT, DATE_FORMAT))
    package = logging.getLogger(PACKAGE_LOGGER)
    package.addHandler(handler)
    try:
        yield path
    finally:
        package.removeHandler(handler)
        handler.close()


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Named logger (root logger for None)."""
    return logging.getLogger(name)
