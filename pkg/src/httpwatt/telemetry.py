"""Host utilization sampling and fixed-window throughput.

Metrics come from a :class:`MetricsProvider`. The psutil-backed provider
reads the live host; the synthetic one replays injected values so the whole
telemetry -> power -> efficiency pipeline can run deterministically in tests.

Disk and NIC activity is reported by the OS as cumulative byte counters. The
sampler turns consecutive readings into a rate and divides by a calibrated
maximum, so every field of a :class:`~httpwatt.power.UtilizationSample` lands
in [0, 1]. A counter that goes backwards (wrap or reset) yields a zero delta
and the sample is flagged.
"""
from __future__ import annotations

import abc
import csv
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

from .exceptions import MetricsUnavailable, SchemaMismatch
from .power import UtilizationSample

log = logging.getLogger(__name__)

DEFAULT_WINDOW_SECS = 5.0
DEFAULT_SAMPLE_PERIOD = 1.0
TELEMETRY_COLUMNS = ("timestamp", "cpu", "mem", "disk", "nic", "bytes_window")


@dataclass(frozen=True)
class RawMetrics:
    """One reading from a provider.

    ``cpu`` and ``mem`` are fractions. Disk and NIC are either cumulative byte
    counters (``disk_bytes``/``nic_bytes``) or, for synthetic providers,
    already-normalized fractions (``disk``/``nic``), which take precedence.
    ``None`` means the metric could not be read.
    """

    cpu: float | None
    mem: float | None = None
    disk_bytes: int | None = None
    nic_bytes: int | None = None
    disk: float | None = None
    nic: float | None = None


class MetricsProvider(abc.ABC):
    @abc.abstractmethod
    def read(self) -> RawMetrics: ...


class PsutilMetricsProvider(MetricsProvider):
    """Live host metrics. The first CPU reading after construction is primed, not reported."""

    def __init__(self):
        import psutil

        self._ps = psutil
        try:
            psutil.cpu_percent(interval=None)
        except Exception as exc:  # pragma: no cover - platform specific
            raise MetricsUnavailable(f"cpu counters unreadable: {exc}") from exc

    def read(self) -> RawMetrics:
        ps = self._ps
        try:
            cpu = ps.cpu_percent(interval=None) / 100.0
        except Exception:  # pragma: no cover
            cpu = None
        try:
            mem = ps.virtual_memory().percent / 100.0
        except Exception:  # pragma: no cover
            mem = None
        try:
            d = ps.disk_io_counters()
            disk = d.read_bytes + d.write_bytes if d else None
        except Exception:  # pragma: no cover
            disk = None
        try:
            n = ps.net_io_counters()
            nic = n.bytes_recv + n.bytes_sent if n else None
        except Exception:  # pragma: no cover
            nic = None
        return RawMetrics(cpu=cpu, mem=mem, disk_bytes=disk, nic_bytes=nic)


class SyntheticMetricsProvider(MetricsProvider):
    """Replays a fixed reading, or a sequence of readings (the last one repeats)."""

    def __init__(self, readings: RawMetrics | Sequence[RawMetrics]):
        self._readings = [readings] if isinstance(readings, RawMetrics) else list(readings)
        if not self._readings:
            raise ValueError("need at least one reading")
        self._i = 0
        self._lock = threading.Lock()

    def read(self) -> RawMetrics:
        with self._lock:
            r = self._readings[min(self._i, len(self._readings) - 1)]
            self._i += 1
            return r


def _unit(v: float) -> float:
    return min(1.0, max(0.0, v))


class UtilizationSampler:
    """Turns provider readings into normalized samples.

    ``disk_max`` and ``nic_max`` are the calibrated peak throughputs in
    bytes/s. When only the CPU is readable the sampler keeps going with the
    other fields at 0 and ``degraded`` set, which is what a cpu-only model
    needs. Without a CPU reading there is nothing to model and
    :class:`MetricsUnavailable` is raised.
    """

    def __init__(
        self,
        provider: MetricsProvider,
        disk_max: float = 500e6,
        nic_max: float = 125e6,
        clock: Callable[[], float] = time.monotonic,
    ):
        if not (disk_max > 0 and nic_max > 0):
            raise ValueError("calibrated maxima must be > 0")
        self.provider = provider
        self.disk_max = disk_max
        self.nic_max = nic_max
        self.clock = clock
        self.degraded = False
        self._last_t: float | None = None
        self._last_disk: int | None = None
        self._last_nic: int | None = None

    def _rate(self, now: int | None, last: int | None, dt: float, peak: float) -> tuple[float, bool]:
        if now is None or last is None or dt <= 0:
            return 0.0, False
        delta = now - last
        if delta < 0:
            return 0.0, True
        return _unit(delta / dt / peak), False

    def sample(self, timestamp: float | None = None) -> UtilizationSample:
        t = self.clock() if timestamp is None else timestamp
        if self._last_t is not None and t < self._last_t:
            t = self._last_t  # keep timestamps monotone
        raw = self.provider.read()
        if raw.cpu is None:
            raise MetricsUnavailable("cpu utilization is unreadable")
        if raw.mem is None or (raw.disk is None and raw.disk_bytes is None) or (raw.nic is None and raw.nic_bytes is None):
            if not self.degraded:
                log.warning("some host metrics are unreadable; continuing with cpu-only inputs")
            self.degraded = True
        dt = t - self._last_t if self._last_t is not None else 0.0
        clamped = False
        if raw.disk is not None:
            disk = _unit(raw.disk)
        else:
            disk, c = self._rate(raw.disk_bytes, self._last_disk, dt, self.disk_max)
            clamped |= c
        if raw.nic is not None:
            nic = _unit(raw.nic)
        else:
            nic, c = self._rate(raw.nic_bytes, self._last_nic, dt, self.nic_max)
            clamped |= c
        self._last_t, self._last_disk, self._last_nic = t, raw.disk_bytes, raw.nic_bytes
        return UtilizationSample(
            timestamp=max(0.0, t),
            cpu=_unit(raw.cpu),
            mem=_unit(raw.mem or 0.0),
            disk=disk,
            nic=nic,
            clamped=clamped,
        )


def sample_utilization(sampler: UtilizationSampler | None = None) -> UtilizationSample:
    """One sample from the live host (or from ``sampler`` when given)."""
    if sampler is None:
        sampler = UtilizationSampler(PsutilMetricsProvider())
    return sampler.sample()


class Sampler(threading.Thread):
    """Background producer taking one sample per period.

    Samples go to ``sink`` (anything with ``put``, typically the same queue
    that carries transfer events) and are also kept on :attr:`samples`. If
    the metrics disappear mid-run the thread stops, logs a warning and sets
    :attr:`failed`; energy for that run is then unavailable.
    """

    def __init__(self, sampler: UtilizationSampler, period: float = DEFAULT_SAMPLE_PERIOD, sink: "queue.Queue | None" = None):
        super().__init__(name="httpwatt-sampler", daemon=True)
        if period <= 0:
            raise ValueError("period must be > 0")
        self.sampler = sampler
        self.period = period
        self.sink = sink
        self.samples: list[UtilizationSample] = []
        self.failed = False
        self._stop_evt = threading.Event()
        self._lock = threading.Lock()

    def sample_now(self, publish: bool = True) -> UtilizationSample | None:
        """Take one sample immediately (e.g. on a window boundary); None once telemetry has failed."""
        with self._lock:
            if self.failed:
                return None
            try:
                s = self.sampler.sample()
            except MetricsUnavailable as exc:
                log.warning("telemetry disabled: %s", exc)
                self.failed = True
                return None
            self.samples.append(s)
        if publish and self.sink is not None:
            self.sink.put(s)
        return s

    def run(self) -> None:
        while not self.failed:
            self.sample_now()
            if self._stop_evt.wait(self.period):
                return

    def stop(self, final_sample: bool = True) -> None:
        self._stop_evt.set()
        if self.is_alive():
            self.join()
        if final_sample:
            self.sample_now(publish=False)

    def snapshot(self) -> list[UtilizationSample]:
        with self._lock:
            return list(self.samples)


# -- windows ----------------------------------------------------------------------


@dataclass
class Window:
    start: float
    end: float
    bytes_moved: int = 0
    samples: list[UtilizationSample] = field(default_factory=list)

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def throughput(self) -> float:
        """bits/s over the nominal window length."""
        return self.bytes_moved * 8.0 / self.length if self.length > 0 else 0.0


def _progress(ev) -> tuple[float, int]:
    if isinstance(ev, tuple):
        return float(ev[0]), int(ev[1])
    return float(ev.timestamp), int(ev.nbytes)


def window_throughput(
    events: Iterable,
    window_length: float = DEFAULT_WINDOW_SECS,
    start: float = 0.0,
    end: float | None = None,
    samples: Iterable[UtilizationSample] = (),
) -> list[Window]:
    """Bucket byte-progress events into tumbling windows starting at ``start``.

    ``events`` holds ``(timestamp, nbytes)`` pairs or byte-progress
    :class:`~httpwatt.transport.base.TransferEvent` objects. An event exactly
    on a boundary belongs to the later window. Empty windows are emitted, up
    to the last event (or up to ``end`` when given).
    """
    if not window_length > 0:
        raise ValueError("window_length must be > 0")
    pts = [_progress(e) for e in events]
    last = max([t for t, _ in pts] + ([end] if end is not None else []), default=start)
    n = int(math.floor((last - start) / window_length)) + 1
    if end is not None and n > 1 and start + (n - 1) * window_length >= end:
        n -= 1  # ``end`` falls exactly on a boundary: no trailing empty window
    wins = [Window(start + i * window_length, start + (i + 1) * window_length) for i in range(n)]
    for t, b in pts:
        if t < start:
            raise ValueError(f"event at {t} precedes window start {start}")
        i = min(int(math.floor((t - start) / window_length)), n - 1)
        wins[i].bytes_moved += b
    for s in samples:
        i = int(math.floor((s.timestamp - start) / window_length))
        if 0 <= i < n:
            wins[i].samples.append(s)
    return wins


# -- telemetry CSV ---------------------------------------------------------------


def write_telemetry_csv(samples: Sequence[UtilizationSample], progress: Iterable, path) -> None:
    """One row per sample; ``bytes_window`` is the bytes moved since the previous sample."""
    pts = sorted(_progress(e) for e in progress)
    rows, j, prev = [], 0, -math.inf
    for s in samples:
        moved = 0
        while j < len(pts) and pts[j][0] <= s.timestamp:
            if pts[j][0] > prev:
                moved += pts[j][1]
            j += 1
        prev = s.timestamp
        rows.append((s, moved))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TELEMETRY_COLUMNS)
        for s, moved in rows:
            w.writerow([repr(s.timestamp), repr(s.cpu), repr(s.mem), repr(s.disk), repr(s.nic), moved])


def read_telemetry_csv(path) -> list[tuple[UtilizationSample, int]]:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise SchemaMismatch(path, f"cannot open: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        for col in TELEMETRY_COLUMNS:
            if col not in header:
                raise SchemaMismatch(path, f"missing column {col!r}")
        out = []
        for lineno, rec in enumerate(reader, start=2):
            rec = {k.strip(): v for k, v in rec.items() if k is not None}
            try:
                s = UtilizationSample(*(float(rec[c]) for c in TELEMETRY_COLUMNS[:5]))
                s.check_range()
                out.append((s, int(float(rec["bytes_window"]))))
            except (TypeError, ValueError) as exc:
                raise SchemaMismatch(path, f"row {lineno}: {exc}") from None
    return out


def iter_samples(rows: Iterable[tuple[UtilizationSample, int]]) -> Iterator[UtilizationSample]:
    for s, _ in rows:
        yield s
