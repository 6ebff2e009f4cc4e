"""The contract every transport satisfies, plus the range-splitting rule."""
from __future__ import annotations

import abc
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from ..planner import FileEntry, Groups, SizeClass, TransferParams
from ..power import UtilizationSample


class EventKind(str, Enum):
    BYTES_PROGRESS = "bytes"
    FILE_COMPLETE = "file_complete"
    SUBGROUP_COMPLETE = "subgroup_complete"
    CHANNEL_ERROR = "channel_error"
    FILE_FAILED = "file_failed"
    WARNING = "warning"


@dataclass(frozen=True)
class TransferEvent:
    kind: EventKind
    timestamp: float
    file_id: str | None = None
    nbytes: int = 0
    group: SizeClass | None = None
    detail: str | None = None


@dataclass(frozen=True)
class RangeTask:
    file: FileEntry
    offset: int
    length: int
    channel: int = -1

    @property
    def end(self) -> int:
        """Inclusive last byte, as used in a ``Range`` header."""
        return self.offset + self.length - 1


def split_ranges(file: FileEntry, parallelism: int, channel: int = -1) -> list[RangeTask]:
    """Contiguous byte ranges covering ``[0, size)``.

    Exactly ``parallelism`` ranges when the file has at least that many bytes,
    otherwise one range per byte. Sizes differ by at most one byte, larger
    ranges first.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if file.size is None:
        raise ValueError(f"{file.id}: cannot split a file of unknown size")
    n = min(parallelism, file.size)
    base, extra = divmod(file.size, n)
    out, off = [], 0
    for i in range(n):
        length = base + (1 if i < extra else 0)
        out.append(RangeTask(file, off, length, channel))
        off += length
    return out


@dataclass
class GroupStats:
    files_total: int = 0
    bytes_total: int = 0
    files_done: int = 0
    bytes_done: int = 0
    files_failed: int = 0
    completed_at: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class WindowReport:
    """What happened during one call to :meth:`Transport.run`."""

    start: float
    end: float
    bytes_moved: float
    energy: float | None = None  # joules, when the transport can measure them itself
    samples: list[UtilizationSample] = field(default_factory=list)
    drained: tuple[SizeClass, ...] = ()  # subgroups whose pending queue emptied
    completed: tuple[SizeClass, ...] = ()
    events: list[TransferEvent] = field(default_factory=list)
    done: bool = False

    @property
    def duration(self) -> float:
        return self.end - self.start


class Transport(abc.ABC):
    """Moves the files of a grouped dataset under externally chosen parameters.

    The control loop calls :meth:`start` once, then alternates :meth:`run`
    (which returns early when a subgroup runs out of pending files) and
    :meth:`configure`. ``TransferParams.concurrency`` is the number of
    channels the subgroup should hold; shrinking takes effect as channels
    finish their in-flight files, and new channels open only while the total
    number of open channels is below the sum of all grants.
    """

    @abc.abstractmethod
    def start(self, groups: Groups, params: Mapping[SizeClass, TransferParams]) -> None: ...

    @abc.abstractmethod
    def configure(self, params: Mapping[SizeClass, TransferParams]) -> None: ...

    @abc.abstractmethod
    def run(self, duration: float | None = None) -> WindowReport: ...

    @property
    @abc.abstractmethod
    def now(self) -> float: ...

    @property
    @abc.abstractmethod
    def done(self) -> bool: ...

    @abc.abstractmethod
    def pending(self, cls: SizeClass) -> int:
        """Files of ``cls`` not yet handed to any channel."""

    @abc.abstractmethod
    def group_stats(self) -> dict[SizeClass, GroupStats]: ...

    def open_channels(self) -> int:
        return 0

    def failures(self) -> list[str]:
        return []

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
