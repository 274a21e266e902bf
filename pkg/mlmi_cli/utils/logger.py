"""
Package logging: one handler on the 'mlmi_cli' logger, text or JSON lines on stderr.

Records carry the run context (seed, chain, output directory) set with
``run_context``; parallel chains run in worker processes, each with its own context.
"""
import json
import logging
import os
import sys
from contextlib import contextmanager
from contextvars import ContextVar
from enum import Enum
from typing import Dict, Iterator

PARENT_LOGGER = "mlmi_cli"

_RUN_CONTEXT: ContextVar[Dict] = ContextVar("mlmi_run_context", default={})


class LogFormat(str, Enum):
    text = "text"
    json = "json"


class OutputFormat(str, Enum):
    text = "text"
    json = "json"


# --- Run context ---
@contextmanager
def run_context(**fields) -> Iterator[Dict]:
    """Tag records logged inside the block; nested blocks add to (and may override) the outer fields."""
    merged = {**_RUN_CONTEXT.get(), **{k: v for k, v in fields.items() if v is not None}}
    token = _RUN_CONTEXT.set(merged)
    try:
        yield merged
    finally:
        _RUN_CONTEXT.reset(token)


def current_run_context() -> Dict:
    return dict(_RUN_CONTEXT.get())


def _record_context(record: logging.LogRecord) -> Dict:
    # extra={"run": {...}} on the call wins over the ambient context
    context = getattr(record, "run", None)
    return dict(context) if context is not None else current_run_context()


# --- Formatters ---
class JSONFormatter(logging.Formatter):
    """One JSON object per line for batch jobs and log collectors."""

    def format(self, record):
        log_record = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "logger": record.name,
            "location": f"{record.pathname}:{record.lineno}",
            "service": os.environ.get("SERVICE_NAME"),
            "message": record.getMessage(),
        }
        context = _record_context(record)
        if context:
            log_record["run"] = context
        if record.exc_info:
            log_record["exception"] = self.formatException(record.exc_info)
        return json.dumps(log_record, default=str)


class HumanReadableFormatter(logging.Formatter):
    """'[LEVEL] message', with the run context as key=value pairs when one is set."""

    def format(self, record):
        context = _record_context(record)
        tags = " ".join(f"{k}={v}" for k, v in context.items())
        prefix = f"[{record.levelname}] [{tags}]" if tags else f"[{record.levelname}]"
        return f"{prefix} {record.getMessage()}"


def _configure_handler(logger_instance, fmt_type):
    for h in logger_instance.handlers[:]:
        logger_instance.removeHandler(h)

    # stderr: stdout is reserved for reports
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(HumanReadableFormatter() if fmt_type == "text" else JSONFormatter())
    logger_instance.addHandler(handler)
    logger_instance.propagate = False


# --- Public API ---
def get_logger(name: str):
    """Module logger; configures the package logger from LOG_FORMAT / LOG_LEVEL on first use."""
    logger = logging.getLogger(name)

    parent_logger = logging.getLogger(PARENT_LOGGER)
    if not parent_logger.handlers:
        _configure_handler(parent_logger, os.environ.get("LOG_FORMAT", "text").lower())
        parent_logger.setLevel(os.environ.get("LOG_LEVEL", "INFO"))

    return logger


def set_log_format(fmt_type: str):
    """Swap the package handler's formatter; module loggers propagate to it."""
    fmt_type = fmt_type.lower()
    os.environ["LOG_FORMAT"] = fmt_type

    parent_logger = logging.getLogger(PARENT_LOGGER)
    _configure_handler(parent_logger, fmt_type)
    parent_logger.setLevel(os.environ.get("LOG_LEVEL", "INFO"))


# --- Output Helpers ---
def print_cli_table(data, headers):
    if not data:
        return
    widths = {h: len(h) for h in headers}
    for row in data:
        for h in headers:
            widths[h] = max(widths[h], len(str(row.get(h, ""))))
    fmt = "  ".join([f"{{:>{widths[h]}}}" for h in headers])
    rule = "-" * (sum(widths.values()) + (len(headers) - 1) * 2)
    print(rule)
    print(fmt.format(*headers))
    print(rule)
    for row in data:
        print(fmt.format(*[str(row.get(h, "")) for h in headers]))
    print(rule)


def print_formatted_output(data, headers=None, output_format: str = None):
    mode = (output_format or os.environ.get("OUTPUT_FORMAT", "text")).lower()
    if mode == "text":
        if headers:
            print_cli_table(data, headers)
        else:
            print(data)
    else:
        print(json.dumps({"cli_output": data}, default=str, sort_keys=True))
