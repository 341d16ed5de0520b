"""Loguru sink setup shared by the CLI and long-running jobs."""

import os
import sys
from typing import Optional

from loguru import logger

DEFAULT_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan> - <level>{message}</level> | {extra}"
)


def configure_logging(level: Optional[str] = None, json: bool = False) -> None:
    """
    Install a single stderr sink.

    Args:
        level: Minimum level; defaults to RETCOMPLETE_LOG_LEVEL or WARNING
        json: Emit one JSON object per record instead of the text format
    """
    level = (level or os.environ.get("RETCOMPLETE_LOG_LEVEL") or "WARNING").upper()
    logger.remove()
    if json:
        logger.add(sys.stderr, level=level, serialize=True)
    else:
        logger.add(sys.stderr, level=level, format=DEFAULT_FORMAT)
