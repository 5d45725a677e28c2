"""Atomic file writes for run outputs."""

import tempfile
from pathlib import Path


def write_file_atomic(file_path: Path, content: str) -> None:
    """
    Write text content atomically using a temporary file and rename.

    Args:
        file_path: Destination file path
        content: Content to write

    Raises:
        OSError: If the write fails
    """
    file_path.parent.mkdir(parents=True, exist_ok=True)

    # Temp file in the same directory so the rename stays on one filesystem
    with tempfile.NamedTemporaryFile(
        mode="w",
        encoding="utf-8",
        dir=file_path.parent,
        delete=False,
        suffix=".tmp",
        newline="",
    ) as tmp:
        tmp.write(content)
        tmp_path = Path(tmp.name)

    tmp_path.replace(file_path)


def write_bytes_atomic(file_path: Path, payload: bytes) -> None:
    """Binary counterpart of write_file_atomic."""
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(mode="wb", dir=file_path.parent, delete=False, suffix=".tmp") as tmp:
        tmp.write(payload)
        tmp_path = Path(tmp.name)
    tmp_path.replace(file_path)


__all__ = ["write_file_atomic", "write_bytes_atomic"]
