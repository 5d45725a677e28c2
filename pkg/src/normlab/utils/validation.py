"""Input validation utilities for normlab runs."""

import math
import re
from pathlib import Path
from typing import Optional, Tuple

from .constants import MAX_ARM_NAME_LENGTH


def validate_output_dir(path_str: str) -> Tuple[bool, str, Path | None]:
    """
    Validate an output directory for experiment files.

    Args:
        path_str: Directory path from user input

    Returns:
        Tuple of (is_valid, error_message, resolved_path)

    The directory is created if missing; an existing regular file is rejected.
    """
    if not path_str or not path_str.strip():
        return False, "Output directory cannot be empty", None

    path_str = path_str.strip()
    if "\x00" in path_str:
        return False, "Invalid path: contains null bytes", None

    try:
        path = Path(path_str).expanduser().resolve()
        if path.exists() and not path.is_dir():
            return False, f"Output path is not a directory: {path}", None
        path.mkdir(parents=True, exist_ok=True)
        return True, "", path
    except (ValueError, OSError, RuntimeError) as e:
        return False, f"Invalid path: {e}", None


def validate_arm_name(name: str) -> Tuple[bool, Optional[str]]:
    """
    Validate an experiment arm name (used as a file stem).

    Args:
        name: Arm name like 'wd_on' or 'l1_half'

    Returns:
        Tuple of (is_valid, error_message)
    """
    if not name or not name.strip():
        return False, "Arm name cannot be empty"

    if not re.match(r"^[a-z0-9][a-z0-9_\-]*$", name):
        return False, f"Invalid arm name '{name}' (lowercase letters, digits, '_' and '-')"

    if len(name) > MAX_ARM_NAME_LENGTH:
        return False, f"Arm name too long (max {MAX_ARM_NAME_LENGTH} characters)"

    return True, None


def validate_loss(value: float) -> Tuple[bool, Optional[str]]:
    """
    Check a training-loss reading.

    Args:
        value: Loss value

    Returns:
        Tuple of (is_valid, error_message); NaN and infinities are invalid
    """
    try:
        value = float(value)
    except (TypeError, ValueError) as e:
        return False, f"Loss is not a number: {e}"

    if math.isnan(value):
        return False, "Loss is NaN"
    if math.isinf(value):
        return False, "Loss is infinite"
    return True, None


__all__ = [
    "validate_output_dir",
    "validate_arm_name",
    "validate_loss",
]
