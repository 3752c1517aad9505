"""Logging configuration for the parallel-cpt toolkit.

Pipeline steps (filtering, packing, training, experiment units) log through
child loggers of ``parallel_cpt`` and attach their numbers as ``extra``
fields. The console shows a compact line with those fields appended; JSON
lines are available for the console and for an optional rotating file, so
that a finished experiment can be parsed back (loss curves, unit timings).

Python warnings (e.g. ``ShortStreamWarning`` from packing) are routed into
the same handlers.

Example:
    >>> from parallel_cpt.logging_config import setup_logging, get_logger
    >>> setup_logging(log_level="DEBUG", json_format=True)
    >>> logger = get_logger(__name__)
    >>> logger.info("Packed windows", extra={"windows": 1024, "context": 64})
"""

from __future__ import annotations

import json
import logging
import sys
import time
from collections.abc import Iterator, MutableMapping
from contextlib import contextmanager
from datetime import datetime, timezone
from logging.handlers import RotatingFileHandler
from typing import Any

PACKAGE_NAME = "parallel_cpt"

_RESERVED = frozenset(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}

_THIRD_PARTY_LOGGERS = ("torch", "sacrebleu", "urllib3", "filelock", "py.warnings")

_LEVEL_COLORS = {
    logging.DEBUG: "\033[36m",
    logging.INFO: "\033[32m",
    logging.WARNING: "\033[33m",
    logging.ERROR: "\033[31m",
    logging.CRITICAL: "\033[35m",
}
_RESET = "\033[0m"


def _fields(record: logging.LogRecord) -> dict[str, Any]:
    """Values that arrived through ``extra``."""
    return {k: v for k, v in vars(record).items() if k not in _RESERVED and not k.startswith("_")}


def _short(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


class StructuredFormatter(logging.Formatter):
    """One JSON object per record.

    Extra fields sit at the top level next to ``ts``, ``level``, ``logger``,
    ``msg`` and ``pid``, so ``jq 'select(.cell == "mix")'`` works directly.
    A field that collides with a base key is kept under ``extra``.
    """

    def format(self, record: logging.LogRecord) -> str:
        payload: dict[str, Any] = {
            "ts": datetime.fromtimestamp(record.created, timezone.utc).isoformat(timespec="milliseconds"),
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
            "pid": record.process,
        }
        clashes = {}
        for key, value in _fields(record).items():
            if key in payload:
                clashes[key] = value
            else:
                payload[key] = value
        if clashes:
            payload["extra"] = clashes
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str, ensure_ascii=False)


class ColoredFormatter(logging.Formatter):
    """``HH:MM:SS LEVEL logger: message  key=value ...`` with optional ANSI colors."""

    def __init__(self, use_colors: bool = True) -> None:
        super().__init__("%(asctime)s %(levelname)-7s %(name)s: %(message)s", "%H:%M:%S")
        self.use_colors = use_colors

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        fields = _fields(record)
        if fields:
            line += "  " + " ".join(f"{key}={_short(value)}" for key, value in fields.items())
        if self.use_colors:
            line = f"{_LEVEL_COLORS.get(record.levelno, '')}{line}{_RESET}"
        return line


def setup_logging(
    log_level: str = "INFO",
    json_format: bool = False,
    log_file: str | None = None,
    max_bytes: int = 10 * 1024 * 1024,
    backup_count: int = 5,
) -> logging.Logger:
    """Configure the package logger; calling it again replaces the handlers.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL).
        json_format: JSON lines on stderr instead of the colored format.
        log_file: Optional rotating log file, always JSON.
        max_bytes: Size at which the log file rotates.
        backup_count: Rotated files to keep.

    Returns:
        The package logger.
    """
    level = logging.getLevelName(log_level.upper())
    if not isinstance(level, int):
        level = logging.INFO

    console = logging.StreamHandler(sys.stderr)
    if json_format:
        console.setFormatter(StructuredFormatter())
    else:
        console.setFormatter(ColoredFormatter(use_colors=sys.stderr.isatty()))
    handlers: list[logging.Handler] = [console]

    if log_file:
        file_handler = RotatingFileHandler(
            log_file, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8"
        )
        file_handler.setFormatter(StructuredFormatter())
        handlers.append(file_handler)

    package = logging.getLogger(PACKAGE_NAME)
    for old in package.handlers:
        old.close()
    package.handlers = handlers
    package.setLevel(level)
    package.propagate = False

    logging.captureWarnings(True)
    warnings_logger = logging.getLogger("py.warnings")
    warnings_logger.handlers = list(handlers)
    warnings_logger.propagate = False

    for name in _THIRD_PARTY_LOGGERS:
        logging.getLogger(name).setLevel(max(level, logging.WARNING))

    package.debug(
        "Logging configured",
        extra={"log_level": logging.getLevelName(level), "json": json_format, "file": log_file},
    )
    return package


def get_logger(name: str) -> logging.Logger:
    """Child of the package logger for ``name`` (usually ``__name__``)."""
    if name == PACKAGE_NAME or name.startswith(PACKAGE_NAME + "."):
        return logging.getLogger(name)
    return logging.getLogger(f"{PACKAGE_NAME}.{name}")


class LoggerAdapter(logging.LoggerAdapter):  # type: ignore[type-arg]
    """Adds fixed context (``{"cell": ..., "seed": ...}``) to every record.

    Per-call ``extra`` values win over the fixed context.

    Example:
        >>> log = LoggerAdapter(get_logger(__name__), {"phase": "cpt"})
        >>> log.info("Validation", extra={"step": 100, "val_loss": 2.31})
    """

    def process(
        self, msg: str, kwargs: MutableMapping[str, Any]
    ) -> tuple[str, MutableMapping[str, Any]]:
        kwargs["extra"] = {**(self.extra or {}), **(kwargs.get("extra") or {})}
        return msg, kwargs


@contextmanager
def log_duration(
    logger: logging.Logger | LoggerAdapter, event: str, **fields: Any
) -> Iterator[dict[str, Any]]:
    """Log ``event`` with elapsed ``seconds`` when the block exits.

    Entries written into the yielded dict are added to the record. If the
    block raises, the record is logged at WARNING with ``failed=True`` and
    the exception propagates.
    """
    info: dict[str, Any] = {}
    start = time.perf_counter()
    failed = False
    try:
        yield info
    except BaseException:
        failed = True
        raise
    finally:
        extra = {**fields, **info, "seconds": round(time.perf_counter() - start, 3)}
        if failed:
            logger.warning(event, extra={**extra, "failed": True})
        else:
            logger.info(event, extra=extra)
