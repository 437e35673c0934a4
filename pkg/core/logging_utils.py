from __future__ import annotations

import logging
import sys

LOGGER_NAMESPACE = "flowlab"


def setup_logging(level: str | int = logging.INFO) -> None:
    """Send the ``flowlab.*`` loggers and Python warnings to a single stderr handler.

    stdout stays reserved for machine-readable output such as ``verify --json``.
    Third-party loggers only get through at WARNING and above.
    """
    unknown = None
    if isinstance(level, str):
        resolved = logging.getLevelName(level.upper())
        if not isinstance(resolved, int):
            unknown, resolved = level, logging.INFO
        level = resolved

    root = logging.getLogger()
    handler = logging.StreamHandler(sys.stderr)
    formatter = logging.Formatter(
        "%(asctime)s %(levelname)s [%(name)s] %(message)s"
    )
    handler.setFormatter(formatter)
    root.handlers = [handler]
    root.setLevel(logging.WARNING)
    logging.getLogger(LOGGER_NAMESPACE).setLevel(level)
    # numpy RuntimeWarnings (overflow in exp and the like) end up in the same stream
    logging.captureWarnings(True)
    if unknown is not None:
        logging.getLogger(LOGGER_NAMESPACE).warning("Unknown log level %r; using INFO", unknown)
