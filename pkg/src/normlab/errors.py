"""Error types for normlab.

Provides:
- Machine-readable error codes shared by the library and the CLI
- A NormlabError hierarchy (each class carries its code)
- Structured error payloads for user-facing output
"""

from __future__ import annotations

import logging
from typing import Dict

logger = logging.getLogger(__name__)


class ErrorCode:
    """Standard error codes."""

    # Shapes and precision
    SHAPE_MISMATCH = "SHAPE_MISMATCH"
    PRECISION_MISMATCH = "PRECISION_MISMATCH"
    AXIS_OUT_OF_RANGE = "AXIS_OUT_OF_RANGE"
    EMPTY_AXIS = "EMPTY_AXIS"
    K_OUT_OF_RANGE = "K_OUT_OF_RANGE"

    # Normalization
    N_TOO_SMALL = "N_TOO_SMALL"
    REDUCTION_TOO_SMALL = "REDUCTION_TOO_SMALL"
    UNINITIALIZED_RUNNING_STATS = "UNINITIALIZED_RUNNING_STATS"
    CACHE_MISMATCH = "CACHE_MISMATCH"
    ZERO_NORM_CHANNEL = "ZERO_NORM_CHANNEL"
    NON_HOMOGENEOUS_ACTIVATION = "NON_HOMOGENEOUS_ACTIVATION"

    # Dynamics
    ZERO_NORM = "ZERO_NORM"
    MISSING_TRAJECTORY = "MISSING_TRAJECTORY"
    NOT_SCALE_INVARIANT = "NOT_SCALE_INVARIANT"

    # Harness
    PARSE_ERROR = "PARSE_ERROR"
    LABEL_OUT_OF_RANGE = "LABEL_OUT_OF_RANGE"
    SHAPE_CHAIN_ERROR = "SHAPE_CHAIN_ERROR"
    DIVERGED = "DIVERGED"
    CONFIG_ERROR = "CONFIG_ERROR"
    IO_ERROR = "IO_ERROR"

    # General
    INTERNAL_ERROR = "INTERNAL_ERROR"


class NormlabError(Exception):
    """Base class for all normlab errors."""

    code: str = ErrorCode.INTERNAL_ERROR


class ShapeMismatch(NormlabError, ValueError):
    code = ErrorCode.SHAPE_MISMATCH


class PrecisionMismatch(NormlabError, ValueError):
    code = ErrorCode.PRECISION_MISMATCH


class AxisOutOfRange(NormlabError, IndexError):
    code = ErrorCode.AXIS_OUT_OF_RANGE


class EmptyAxis(NormlabError, ValueError):
    code = ErrorCode.EMPTY_AXIS


class KOutOfRange(NormlabError, ValueError):
    code = ErrorCode.K_OUT_OF_RANGE


class NTooSmall(NormlabError, ValueError):
    code = ErrorCode.N_TOO_SMALL


class ReductionTooSmall(NormlabError, ValueError):
    code = ErrorCode.REDUCTION_TOO_SMALL


class UninitializedRunningStats(NormlabError, RuntimeError):
    code = ErrorCode.UNINITIALIZED_RUNNING_STATS


class CacheMismatch(NormlabError, ValueError):
    code = ErrorCode.CACHE_MISMATCH


class ZeroNormChannel(NormlabError, ValueError):
    code = ErrorCode.ZERO_NORM_CHANNEL


class NonHomogeneousActivation(NormlabError, ValueError):
    code = ErrorCode.NON_HOMOGENEOUS_ACTIVATION


class ZeroNorm(NormlabError, ValueError):
    code = ErrorCode.ZERO_NORM


class MissingTrajectory(NormlabError, LookupError):
    code = ErrorCode.MISSING_TRAJECTORY


class NotScaleInvariant(NormlabError, ValueError):
    code = ErrorCode.NOT_SCALE_INVARIANT


class ParseError(NormlabError, ValueError):
    """Malformed binary or text input; `offset` is the byte offset of the problem."""

    code = ErrorCode.PARSE_ERROR

    def __init__(self, message: str, offset: int = 0) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class LabelOutOfRange(NormlabError, ValueError):
    code = ErrorCode.LABEL_OUT_OF_RANGE


class ShapeChainError(NormlabError, ValueError):
    code = ErrorCode.SHAPE_CHAIN_ERROR


class Diverged(NormlabError, RuntimeError):
    """Training produced a NaN/inf loss reading."""

    code = ErrorCode.DIVERGED

    def __init__(self, epoch: int, step: int, message: str | None = None) -> None:
        super().__init__(message or f"training diverged at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class ConfigError(NormlabError, ValueError):
    code = ErrorCode.CONFIG_ERROR


def describe_error(exc: BaseException) -> Dict:
    """Create a structured error payload.

    Args:
        exc: Exception raised by normlab or by the runtime

    Returns:
        Dict with "code" and "message" (plus "offset" for parse errors)
    """
    if isinstance(exc, NormlabError):
        payload = {"code": exc.code, "message": str(exc)}
        if isinstance(exc, ParseError):
            payload["offset"] = exc.offset
        return payload
    if isinstance(exc, OSError):
        return {"code": ErrorCode.IO_ERROR, "message": str(exc)}

    logger.error(f"Unexpected error: {exc}", exc_info=True)
    return {"code": ErrorCode.INTERNAL_ERROR, "message": "An unexpected error occurred."}


__all__ = [
    "ErrorCode",
    "NormlabError",
    "ShapeMismatch",
    "PrecisionMismatch",
    "AxisOutOfRange",
    "EmptyAxis",
    "KOutOfRange",
    "NTooSmall",
    "ReductionTooSmall",
    "UninitializedRunningStats",
    "CacheMismatch",
    "ZeroNormChannel",
    "NonHomogeneousActivation",
    "ZeroNorm",
    "MissingTrajectory",
    "NotScaleInvariant",
    "ParseError",
    "LabelOutOfRange",
    "ShapeChainError",
    "Diverged",
    "ConfigError",
    "describe_error",
]
