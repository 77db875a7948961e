import logging
import os
import sys
from pathlib import Path
from typing import Optional


def _default_log_file() -> Optional[Path]:
    # Empty DSRAN_LOG_FILE disables the file handler.
    raw = os.environ.get("DSRAN_LOG_FILE", "dsran.log")
    return Path(raw) if raw else None


def setup_logger(name: str, log_file: Optional[Path] = None) -> logging.Logger:
    """
    Configures and returns a logger instance with both file and console handlers.

    The console handler writes to stderr so that stdout stays reserved for
    JSON reports emitted by the command line.

    Args:
        name: The name of the logger (usually __name__).
        log_file: Path to the log output file. Defaults to $DSRAN_LOG_FILE
                  or 'dsran.log'.

    Returns:
        logging.Logger: Configured logger.
    """
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False

    # Prevent adding handlers multiple times if setup is called repeatedly
    if not logger.handlers:
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )

        # File Handler (Detailed)
        target = log_file if log_file is not None else _default_log_file()
        if target is not None:
            try:
                fh = logging.FileHandler(target, mode='a', encoding='utf-8')
                fh.setLevel(logging.DEBUG)
                fh.setFormatter(formatter)
                logger.addHandler(fh)
            except (PermissionError, OSError) as e:
                sys.stderr.write(f"CRITICAL: Could not setup file logging: {e}\n")

        # Console Handler (Info and above unless overridden)
        console_level = os.environ.get("DSRAN_LOG_LEVEL", "INFO").upper()
        ch = logging.StreamHandler(sys.stderr)
        ch.setLevel(getattr(logging, console_level, logging.INFO))
        ch.setFormatter(formatter)
        logger.addHandler(ch)

    return logger
