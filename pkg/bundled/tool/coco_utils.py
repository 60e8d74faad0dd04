"""Utility functions, errors and logging helpers shared by the simulator modules."""
from __future__ import annotations

import logging
import os
import re
from typing import Any, List, Sequence

from rich.console import Console
from rich.logging import RichHandler

LOGGER = logging.getLogger("coco")
CONSOLE = Console(stderr=True)

SEED_RANGE_RE = re.compile(r"^\s*(?P<start>\d+)\s*(?:\.\.\s*(?P<stop>\d+))?\s*$")
DEFAULT_MAX_WORKERS = 8


# **********************************************************
# Errors.
# **********************************************************
class CocoError(Exception):
    """Base class for all simulator errors."""

    pass  # pylint: disable=unnecessary-pass


class ConfigurationError(CocoError):
    """Configuration is invalid; `field` names the offending entry when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class NumericalError(CocoError):
    """A numerical routine failed; `residual` is the residual norm when available."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class InvalidInputError(CocoError):
    """Input values are outside the domain of the operation."""

    pass  # pylint: disable=unnecessary-pass


class DegenerateConditionalError(CocoError):
    """Conditioning produced a density with zero total mass."""

    pass  # pylint: disable=unnecessary-pass


class EvidenceCollapseError(CocoError):
    """Every particle assigns zero likelihood to the data."""

    pass  # pylint: disable=unnecessary-pass


class PairingError(CocoError):
    """Algorithm and oracle ledgers do not share an interaction schedule."""

    pass  # pylint: disable=unnecessary-pass


class SimulationError(CocoError):
    """Failure inside the simulation loop, tagged with the global step and user."""

    def __init__(self, message: str, t: int, user_id: int):
        super().__init__(f"{message} (t={t}, user_id={user_id})")
        self.t = t
        self.user_id = user_id


# **********************************************************
# Small helpers.
# **********************************************************
def parse_seed_range(text: str) -> List[int]:
    """Parses `A..B` (inclusive) or a single seed `A`."""
    match = SEED_RANGE_RE.match(text)
    if not match:
        raise ConfigurationError(f"Invalid seed range: {text!r}", field="--seeds")
    start = int(match.group("start"))
    stop = int(match.group("stop")) if match.group("stop") is not None else start
    if stop < start:
        raise ConfigurationError(f"Empty seed range: {text!r}", field="--seeds")
    return list(range(start, stop + 1))


def get_max_workers() -> int:
    """Worker cap for per-seed parallelism, honouring `COCO_THREADS`."""
    value = os.getenv("COCO_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            log_warning(f"Ignoring invalid COCO_THREADS={value!r}")
    return max(1, min(DEFAULT_MAX_WORKERS, os.cpu_count() or 1))


def format_float(value: float) -> str:
    """Round-trippable float text with 17 significant digits."""
    return f"{float(value):.17g}"


def format_row(values: Sequence[Any]) -> List[str]:
    """Formats a CSV row; floats get 17 significant digits."""
    return [format_float(v) if isinstance(v, float) else str(v) for v in values]


# *****************************************************
# Logging and notification.
# *****************************************************
def configure_logging(level: str | None = None) -> None:
    """Attaches a rich handler to the package logger once."""
    level = (level or os.getenv("COCO_LOG_LEVEL", "WARNING")).upper()
    LOGGER.setLevel(level)
    if not any(isinstance(h, RichHandler) for h in LOGGER.handlers):
        LOGGER.addHandler(
            RichHandler(console=CONSOLE, show_path=False, rich_tracebacks=False)
        )


def _notify(message: str, style: str, allowed: Sequence[str]) -> None:
    if os.getenv("COCO_SHOW_NOTIFICATION", "off") in allowed:
        CONSOLE.print(message, style=style, markup=False, highlight=False)


def log_to_output(message: str, level: int = logging.DEBUG) -> None:
    LOGGER.log(level, message)


def log_error(message: str) -> None:
    LOGGER.error(message)
    _notify(message, "bold red", ["onError", "onWarning", "always"])


def log_warning(message: str) -> None:
    LOGGER.warning(message)
    _notify(message, "yellow", ["onWarning", "always"])


def log_always(message: str) -> None:
    LOGGER.info(message)
    _notify(message, "cyan", ["always"])
