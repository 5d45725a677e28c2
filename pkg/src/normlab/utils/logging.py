"""Logging setup for the CLI plus arm tagging for experiment runs.

Every record that reaches a normlab handler carries an `arm` attribute: the
name of the experiment arm being trained in the current process, or "-".
"""

import logging
import sys
from contextlib import contextmanager
from contextvars import ContextVar
from pathlib import Path
from typing import Iterator, Optional

NO_ARM = "-"

_current_arm: ContextVar[str] = ContextVar("normlab_arm", default=NO_ARM)

CONSOLE_FORMAT = "[%(levelname)s] %(name)s%(arm_tag)s: %(message)s"
FILE_FORMAT = "%(asctime)s [%(levelname)s] arm=%(arm)s %(name)s.%(funcName)s:%(lineno)d - %(message)s"


class ArmFilter(logging.Filter):
    """Stamps records with the active arm; never drops a record."""

    def filter(self, record: logging.LogRecord) -> bool:
        arm = _current_arm.get()
        record.arm = arm
        record.arm_tag = "" if arm == NO_ARM else f" [{arm}]"
        return True


def current_arm() -> str:
    return _current_arm.get()


@contextmanager
def arm_context(name: str) -> Iterator[str]:
    """Tag log records emitted inside the block with arm `name`."""
    token = _current_arm.set(name)
    try:
        yield name
    finally:
        _current_arm.reset(token)


def setup_logging(level: str = "INFO", log_file: Optional[Path] = None) -> logging.Logger:
    """
    Configure the "normlab" logger tree.

    Args:
        level: DEBUG, INFO, WARNING, ERROR or CRITICAL (unknown names mean INFO)
        log_file: Optional file that receives every record with timestamp and arm

    Returns:
        The configured "normlab" logger
    """
    logger = logging.getLogger("normlab")
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    for handler in logger.handlers:
        handler.close()
    logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.DEBUG)
    console_handler.addFilter(ArmFilter())
    console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        file_handler.addFilter(ArmFilter())
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        logger.addHandler(file_handler)

    return logger


__all__ = ["NO_ARM", "ArmFilter", "arm_context", "current_arm", "setup_logging"]
