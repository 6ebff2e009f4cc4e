"""Dataset grouping and per-subgroup transfer parameters.

Files are split into Small / Medium / Large relative to the bandwidth-delay
product (BDP) of the path, and each subgroup gets its own pipelining,
parallelism and concurrency derived from BDP, its mean file size and the TCP
buffer size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .exceptions import EmptyDataset

DEFAULT_PIPELINING_CAP = 32
SMALL_FRACTION = Fraction(1, 10)


class SizeClass(str, Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"

    @property
    def order(self) -> int:
        return _ORDER[self]


_ORDER = {SizeClass.SMALL: 0, SizeClass.MEDIUM: 1, SizeClass.LARGE: 2}
SMALL_TO_LARGE = (SizeClass.SMALL, SizeClass.MEDIUM, SizeClass.LARGE)
LARGE_TO_SMALL = (SizeClass.LARGE, SizeClass.MEDIUM, SizeClass.SMALL)


@dataclass(frozen=True)
class FileEntry:
    id: str
    size: int | None  # None only for files whose size could not be discovered

    def __post_init__(self):
        if self.size is not None and self.size <= 0:
            raise ValueError(f"{self.id}: size must be > 0, got {self.size}")


@dataclass(frozen=True)
class NetworkProfile:
    bandwidth: float  # bits/s
    rtt: float  # s
    tcp_buffer: float  # bytes

    def __post_init__(self):
        for name in ("bandwidth", "rtt", "tcp_buffer"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    def bdp(self) -> float:
        """Bandwidth-delay product in bytes."""
        return self.bandwidth * self.rtt / 8.0


@dataclass(frozen=True)
class SubGroup:
    cls: SizeClass
    files: tuple[FileEntry, ...] = ()

    @property
    def total_bytes(self) -> int:
        return sum(f.size or 0 for f in self.files)

    @property
    def count(self) -> int:
        return len(self.files)

    @property
    def known_count(self) -> int:
        return sum(1 for f in self.files if f.size is not None)

    @property
    def avg_file_size(self) -> float:
        """Mean over files of known size; 0.0 when there are none."""
        n = self.known_count
        return self.total_bytes / n if n else 0.0

    def __bool__(self) -> bool:
        return bool(self.files)


@dataclass(frozen=True)
class TransferParams:
    pipelining: int = 1
    parallelism: int = 1
    concurrency: int = 0  # 0: waiting for a channel grant

    def __post_init__(self):
        if self.pipelining < 1 or self.parallelism < 1 or self.concurrency < 0:
            raise ValueError(f"invalid transfer parameters {self}")

    def with_concurrency(self, cc: int) -> "TransferParams":
        return replace(self, concurrency=cc)


Groups = Mapping[SizeClass, SubGroup]


def classify(size: int | None, bdp: float) -> SizeClass:
    if size is None:
        return SizeClass.MEDIUM
    if size < SMALL_FRACTION * bdp:
        return SizeClass.SMALL
    if size < bdp:
        return SizeClass.MEDIUM
    return SizeClass.LARGE


def group_files(files: Sequence[FileEntry], profile: NetworkProfile) -> dict[SizeClass, SubGroup]:
    """Partition files by size against BDP; empty subgroups are kept."""
    if not files:
        raise EmptyDataset("no files to transfer")
    bdp = _bdp(profile)
    buckets: dict[SizeClass, list[FileEntry]] = {c: [] for c in SMALL_TO_LARGE}
    for f in files:
        buckets[classify(f.size, bdp)].append(f)
    return {c: SubGroup(c, tuple(buckets[c])) for c in SMALL_TO_LARGE}


def _ceil_div(a, b) -> int:
    # exact rational ceiling; float division can land on the wrong side of an integer
    return math.ceil(Fraction(a) / Fraction(b))


def _bdp(profile: NetworkProfile) -> Fraction:
    return Fraction(profile.bandwidth) * Fraction(profile.rtt) / 8


def _avg(group: SubGroup, profile: NetworkProfile) -> Fraction:
    # a subgroup made only of unknown-size files is planned as if its files were one BDP each
    n = group.known_count
    return Fraction(group.total_bytes, n) if n else _bdp(profile)


def optimal_pipelining(group: SubGroup, profile: NetworkProfile, cap: int = DEFAULT_PIPELINING_CAP) -> int:
    if not group:
        raise EmptyDataset(f"{group.cls.value} subgroup is empty")
    return max(1, min(_ceil_div(_bdp(profile), _avg(group, profile)), cap))


def optimal_parallelism(group: SubGroup, profile: NetworkProfile) -> int:
    if not group:
        raise EmptyDataset(f"{group.cls.value} subgroup is empty")
    buf = profile.tcp_buffer
    return max(1, min(_ceil_div(_bdp(profile), buf), _ceil_div(_avg(group, profile), buf)))


def min_energy_concurrency(group: SubGroup, profile: NetworkProfile, remaining_channels: int) -> int:
    if remaining_channels < 0:
        raise ValueError("remaining_channels must be >= 0")
    if remaining_channels == 0 or not group:
        return 0
    cc = min(_ceil_div(_bdp(profile), _avg(group, profile)), _ceil_div(remaining_channels + 1, 2))
    return max(0, min(cc, remaining_channels))


def optimal_params(
    groups: Groups, profile: NetworkProfile, pp_cap: int = DEFAULT_PIPELINING_CAP
) -> dict[SizeClass, TransferParams]:
    """Pipelining and parallelism for every non-empty subgroup, concurrency 0."""
    return {
        c: TransferParams(optimal_pipelining(g, profile, pp_cap), optimal_parallelism(g, profile), 0)
        for c, g in groups.items()
        if g
    }


def subgroup_proportions(groups: Groups, byte_weight: float = 0.5) -> dict[SizeClass, float]:
    """Blend of byte share and file-count share per subgroup."""
    total_bytes = sum(g.total_bytes for g in groups.values())
    total_count = sum(g.count for g in groups.values())
    if total_count == 0:
        raise EmptyDataset("all subgroups are empty")
    out = {}
    for c in SMALL_TO_LARGE:
        g = groups.get(c)
        if not g:
            out[c] = 0.0
            continue
        byte_share = g.total_bytes / total_bytes if total_bytes else 0.0
        out[c] = byte_weight * byte_share + (1.0 - byte_weight) * g.count / total_count
    return out


def apportion(total: int, weights: Mapping[SizeClass, float]) -> dict[SizeClass, int]:
    """Integer split of ``total`` by largest remainder; ties go to the smaller class."""
    live = [c for c in SMALL_TO_LARGE if weights.get(c, 0.0) > 0]
    out = {c: 0 for c in SMALL_TO_LARGE}
    if total <= 0 or not live:
        return out
    wsum = sum(weights[c] for c in live)
    quotas = {c: total * weights[c] / wsum for c in live}
    for c in live:
        out[c] = int(math.floor(quotas[c]))
    left = total - sum(out.values())
    by_rem = sorted(live, key=lambda c: (-(quotas[c] - out[c]), c.order))
    for c in by_rem[:left]:
        out[c] += 1
    return out


def read_manifest(path: str | Path) -> list[FileEntry]:
    """Parse ``<url> [size_bytes]`` lines; blank lines and ``#`` comments are skipped."""
    files = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) > 2:
            raise ValueError(f"{path}:{lineno}: expected '<url> <size_bytes>'")
        size = int(parts[1]) if len(parts) == 2 else None
        files.append(FileEntry(parts[0], size))
    if not files:
        raise EmptyDataset(f"{path}: manifest lists no files")
    return files


def write_manifest(files: Iterable[FileEntry], path: str | Path) -> None:
    lines = [f"{f.id} {f.size}" if f.size is not None else f.id for f in files]
    Path(path).write_text("\n".join(lines) + "\n")
