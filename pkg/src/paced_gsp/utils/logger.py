import logging
import sys
from pathlib import Path
from typing import Optional

from pythonjsonlogger import jsonlogger


def setup_logger(
    name: str = "paced_gsp",
    log_file: Optional[str] = None,
    level: str = "INFO",
    log_dir: str = "logs",
) -> logging.Logger:
    """
    Setup the package logger: readable lines on stderr, JSON lines on disk.

    stdout stays clean for machine-readable command output.

    Usage:
        logger = setup_logger("paced_gsp", "run.log")
        logger.info("pacing solved", extra={"bidders": 12, "iterations": 41})
    """
    logger = logging.getLogger(name)
    logger.setLevel(level.upper())

    # Remove any existing handlers to avoid duplicates
    logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(
        logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
    )
    logger.addHandler(console_handler)

    if log_file:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(Path(log_dir) / log_file)
        file_handler.setFormatter(
            jsonlogger.JsonFormatter(
                "%(asctime)s %(levelname)s %(name)s %(message)s",
                rename_fields={"asctime": "timestamp", "levelname": "level"},
                datefmt="%Y-%m-%d %H:%M:%S",
            )
        )
        logger.addHandler(file_handler)

    # Prevent propagation to root logger
    logger.propagate = False

    return logger
