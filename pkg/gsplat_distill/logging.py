import os
import sys

from loguru import logger

logger.remove()
logger.add(
    sys.stderr,
    format="<level>{message}</level>",
    colorize=True,
    level=os.environ.get("LEVEL") or "INFO",
)


def set_level(level: str):
    """Replace the sink with one at the given level (used by the --verbose flag)"""
    logger.remove()
    logger.add(sys.stderr, format="<level>{message}</level>", colorize=True, level=level)
