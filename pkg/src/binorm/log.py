"""Logging setup for binorm."""

import logging
import os

from rich.console import Console
from rich.logging import RichHandler

from binorm.errors import ConfigurationError

LOG_ENV = "BINORM_LOG"

LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def resolve_level(name: str | None = None) -> int:
    """Map a level name (or the BINORM_LOG environment variable) to a logging level.

    Args:
        name: Level name; falls back to BINORM_LOG, then "info".

    Returns:
        The numeric logging level.
    """
    if name is None:
        name = os.environ.get(LOG_ENV, "info")
    key = name.strip().lower()
    if key not in LEVELS:
        raise ConfigurationError(
            f"{LOG_ENV} must be one of {', '.join(LEVELS)}, got '{name}'"
        )
    return LEVELS[key]


def setup_logging(name: str | None = None) -> None:
    """Route all binorm loggers through a rich handler on stderr."""
    handler = RichHandler(
        console=Console(stderr=True),
        show_path=False,
        rich_tracebacks=False,
    )
    logging.basicConfig(
        level=resolve_level(name),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[handler],
        force=True,
    )
