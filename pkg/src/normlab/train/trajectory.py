"""Per-step weight-norm trajectories of normalized layers.

File format: CSV with header `step,layer,channel,norm`, one row per record,
rows ordered by (step, layer, channel). Norms are written with repr() so a
reload reproduces them bit for bit.
"""

from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple

from pydantic import ValidationError

from normlab.errors import MissingTrajectory, ParseError
from normlab.schema.results import TrajectoryRecord
from normlab.utils.constants import TRAJECTORY_HEADER
from normlab.utils.fileio import write_file_atomic

logger = logging.getLogger(__name__)

Key = Tuple[int, int, int]


class TrajectoryStore:
    """In-memory set of TrajectoryRecords keyed by (step, layer, channel)."""

    def __init__(self, records: Iterable[TrajectoryRecord] = ()) -> None:
        self._records: Dict[Key, TrajectoryRecord] = {}
        for record in records:
            self.add(record)

    def add(self, record: TrajectoryRecord) -> None:
        key = (record.step, record.layer, record.channel)
        if key in self._records:
            raise ValueError(f"duplicate trajectory record for step={key[0]} layer={key[1]} channel={key[2]}")
        self._records[key] = record

    def norm(self, step: int, layer: int, channel: int) -> float:
        try:
            return self._records[(step, layer, channel)].norm
        except KeyError:
            raise MissingTrajectory(
                f"no reference norm for step={step} layer={layer} channel={channel}"
            ) from None

    def layer_norms(self, step: int, layer: int, channels: int) -> List[float]:
        return [self.norm(step, layer, c) for c in range(channels)]

    def records(self) -> List[TrajectoryRecord]:
        return [self._records[key] for key in sorted(self._records)]

    @property
    def steps(self) -> List[int]:
        return sorted({key[0] for key in self._records})

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[TrajectoryRecord]:
        return iter(self.records())

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TRAJECTORY_HEADER)
        for r in self.records():
            writer.writerow([r.step, r.layer, r.channel, repr(r.norm)])
        return buffer.getvalue()

    def write(self, path: Path) -> Path:
        path = Path(path)
        write_file_atomic(path, self.to_csv())
        logger.info(f"Wrote {len(self)} trajectory records to {path}")
        return path

    @classmethod
    def parse(cls, text: str) -> "TrajectoryStore":
        """Parse trajectory CSV text.

        Raises:
            ParseError: wrong header, malformed row or duplicate key (offset of the row)
        """
        store = cls()
        offset = 0
        lines = text.splitlines(keepends=True)
        if not lines or lines[0].strip() != ",".join(TRAJECTORY_HEADER):
            raise ParseError(f"trajectory header must be '{','.join(TRAJECTORY_HEADER)}'", offset=0)
        offset = len(lines[0].encode("utf-8"))

        for line in lines[1:]:
            row = line.strip()
            if row:
                fields = row.split(",")
                try:
                    if len(fields) != len(TRAJECTORY_HEADER):
                        raise ValueError(f"expected {len(TRAJECTORY_HEADER)} fields, got {len(fields)}")
                    record = TrajectoryRecord(
                        step=int(fields[0]), layer=int(fields[1]), channel=int(fields[2]), norm=float(fields[3])
                    )
                    store.add(record)
                except (ValueError, ValidationError) as e:
                    raise ParseError(f"bad trajectory row {row!r}: {e}", offset=offset) from None
            offset += len(line.encode("utf-8"))
        return store

    @classmethod
    def read(cls, path: Path) -> "TrajectoryStore":
        path = Path(path)
        if not path.exists():
            raise MissingTrajectory(f"trajectory file not found: {path}")
        store = cls.parse(path.read_text(encoding="utf-8"))
        logger.info(f"Loaded {len(store)} trajectory records from {path}")
        return store


class TrajectoryRecorder:
    """Collects per-channel norms during a run (norms are taken before the update at each step)."""

    def __init__(self) -> None:
        self.store = TrajectoryStore()

    def record(self, step: int, layer: int, norms: Sequence[float]) -> None:
        for channel, norm in enumerate(norms):
            self.store.add(TrajectoryRecord(step=step, layer=layer, channel=channel, norm=float(norm)))

    def series(self, layer: int, channel: int) -> List[float]:
        """Norm of one channel at every recorded step, in step order."""
        return [r.norm for r in self.store.records() if r.layer == layer and r.channel == channel]

    def channels(self) -> List[Tuple[int, int]]:
        return sorted({(r.layer, r.channel) for r in self.store.records()})


__all__ = ["TrajectoryStore", "TrajectoryRecorder"]
