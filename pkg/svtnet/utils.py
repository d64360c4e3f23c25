"""
Utility functions for svtnet.

Logging setup and console helpers, plus seeded random streams.
"""

import json
import logging
import os
import zlib
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from rich.console import Console
from rich.logging import RichHandler

# Pretty output goes to stdout, errors and log lines to stderr
console = Console()
error_console = Console(stderr=True)

LOG_ENV_VAR = "SVT_LOG"
LOG_LEVELS = ("ERROR", "WARNING", "INFO", "DEBUG")

# Attributes passed through `extra=` that end up in the JSON line
EXTRA_FIELDS = ("stage", "event", "metadata")


def resolve_log_level(configured: str = "INFO", verbose: bool = False) -> str:
    """
    Pick the effective log level.

    Precedence: --verbose, then SVT_LOG={error,info,debug}, then the configured level.
    """
    if verbose:
        return "DEBUG"
    env = os.environ.get(LOG_ENV_VAR, "").strip().upper()
    return env if env in LOG_LEVELS else configured.upper()


def setup_logging(
    log_file: Optional[Path] = None,
    log_level: str = "INFO",
    log_format: str = "structured",
    console_output: bool = True,
) -> logging.Logger:
    """
    Configure the "svtnet" logger; library modules log through its children.

    Args:
        log_file: JSON-lines (or plain) log file; no file handler if None
        log_level: One of ERROR, WARNING, INFO, DEBUG
        log_format: "structured" writes JSON lines, "pretty" uses rich on the console
        console_output: Also log to stderr

    Returns:
        The configured logger
    """
    logger = logging.getLogger("svtnet")
    logger.setLevel(log_level.upper())
    for handler in logger.handlers:
        handler.close()
    logger.handlers = []
    logger.propagate = False

    structured = log_format == "structured"
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(log_file)
        handler.setFormatter(
            StructuredFormatter()
            if structured
            else logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
        )
        logger.addHandler(handler)

    if console_output:
        if structured:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
        else:
            handler = RichHandler(console=error_console, rich_tracebacks=True, show_time=False)
        logger.addHandler(handler)

    return logger


class StructuredFormatter(logging.Formatter):
    """One JSON object per record, carrying the `extra=` fields listed in EXTRA_FIELDS."""

    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "timestamp": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        entry.update(
            {name: getattr(record, name) for name in EXTRA_FIELDS if hasattr(record, name)}
        )
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry, default=str)


def rng_stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Independent, reproducible random stream for one named purpose.

    All randomness flows from the experiment seed through named sub-streams
    ("dataset", "init", "batch", "augment"), optionally keyed further by
    integers such as an epoch or a sample id.
    """
    entropy = [int(seed), zlib.crc32(name.encode("utf-8")), *(int(k) for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def format_duration(seconds: float) -> str:
    """Whole seconds as "45s", "1m 23s" or "1h 2m 5s"."""
    minutes, secs = divmod(int(seconds), 60)
    hours, minutes = divmod(minutes, 60)
    if hours:
        return f"{hours}h {minutes}m {secs}s"
    if minutes:
        return f"{minutes}m {secs}s"
    return f"{secs}s"


def _say(target: Console, style: str, mark: str, message: str) -> None:
    target.print(f"[{style}]{mark}[/{style}] {message}")


def print_banner(title: str) -> None:
    console.rule(f"[bold blue]{title}[/bold blue]")


def print_success(message: str) -> None:
    _say(console, "bold green", "✓", message)


def print_error(message: str) -> None:
    _say(error_console, "bold red", "✗", message)


def print_warning(message: str) -> None:
    _say(console, "bold yellow", "⚠", message)


def print_info(message: str) -> None:
    _say(console, "bold cyan", "ℹ", message)
