"""Deterministic fluid simulator of multi-channel HTTP transfers.

The model is deliberately small:

* every stream in its data phase gets ``bandwidth / N`` where ``N`` is the
  number of streams in data phase (processor sharing). A response larger than
  one TCP buffer is additionally window-limited to ``tcp_buffer / rtt``;
  a response that fits in one buffer is not.
* a request pays one RTT of first-byte latency unless it was pipelined behind
  a predecessor on the same connection, then ``per_request_overhead`` which
  is serialized per connection (server-side file open/read).
* a connection keeps at most ``pipelining`` requests outstanding, and only
  issues another while the bytes it already has outstanding are below one
  BDP, since a deeper pipeline cannot be in flight at once.
* power is ``idle + per_channel * open_busy_channels + per_parallel * extra
  streams``, and is piecewise constant between events, so energy is exact.

All power constants are synthetic; they exist to reproduce the qualitative
trade-off between higher instantaneous power and shorter transfers.
"""
from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .planner import (
    DEFAULT_PIPELINING_CAP,
    SMALL_TO_LARGE,
    FileEntry,
    Groups,
    NetworkProfile,
    SizeClass,
    SubGroup,
    TransferParams,
    group_files,
    optimal_params,
)
from .power import ModelKind, PowerModel, UtilizationSample
from .sla import (
    DEFAULT_WINDOW_SECS,
    EfficiencySample,
    TransferOutcome,
    TransferPlan,
    execute_plan,
    run_fixed_concurrency,
)
from .transport.base import EventKind, GroupStats, Transport, TransferEvent, WindowReport

_INF = float("inf")


@dataclass(frozen=True)
class SimProfile:
    bandwidth: float = 1e9  # bits/s
    rtt: float = 0.060  # s
    per_request_overhead: float = 0.001  # s
    idle_power: float = 10.0  # W
    per_channel_power: float = 0.5  # W per busy channel
    per_parallel_power: float = 0.5  # W per extra parallel stream
    tcp_buffer: float | None = 4e6  # bytes; None disables the window limit
    sample_period: float = 1.0  # s between utilization samples
    dynamic_power_scale: float = 100.0  # W of dynamic power reported as cpu=1.0
    jitter: float = 0.0  # relative RTT jitter, drawn from the seeded generator

    def __post_init__(self):
        for name in ("bandwidth", "rtt", "sample_period", "dynamic_power_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("per_request_overhead", "idle_power", "per_channel_power", "per_parallel_power", "jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tcp_buffer is not None and not self.tcp_buffer > 0:
            raise ValueError("tcp_buffer must be > 0")

    def bdp(self) -> float:
        return self.bandwidth * self.rtt / 8.0

    def network_profile(self) -> NetworkProfile:
        return NetworkProfile(self.bandwidth, self.rtt, self.tcp_buffer if self.tcp_buffer else self.bdp())

    def power_model(self) -> PowerModel:
        """A cpu-only model that maps this profile's utilization samples back to its watts."""
        return PowerModel(ModelKind.CPU_ONLY, self.idle_power, self.dynamic_power_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimProfile":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sim profile keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "SimProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


DEFAULT_PROFILE = SimProfile()


class SimClock:
    """Time plus an event heap ordered by (time, channel id, insertion order)."""

    __slots__ = ("now", "_heap", "_seq")

    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = 0

    def push(self, when: float, channel: int, action) -> None:
        if when < self.now:
            raise ValueError("cannot schedule into the past")
        self._seq += 1
        heapq.heappush(self._heap, (when, channel, self._seq, action))

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else _INF

    def pop(self):
        when, _, _, action = heapq.heappop(self._heap)
        return when, action

    def __len__(self) -> int:
        return len(self._heap)


# -- internal state ------------------------------------------------------------------


class _File:
    __slots__ = ("entry", "cls", "ranges_left", "done_bytes")

    def __init__(self, entry: FileEntry, cls: SizeClass):
        self.entry = entry
        self.cls = cls
        self.ranges_left = 0
        self.done_bytes = 0


class _Req:
    __slots__ = ("file", "length", "issued")

    def __init__(self, file: _File, length: int):
        self.file = file
        self.length = length
        self.issued = 0.0


class _Stream:
    __slots__ = ("channel", "index", "queued", "outstanding", "in_data", "capped")

    def __init__(self, channel: "_Channel", index: int):
        self.channel = channel
        self.index = index
        self.queued: deque[_Req] = deque()
        self.outstanding: deque[_Req] = deque()
        self.in_data = False
        self.capped = False

    @property
    def busy(self) -> bool:
        return bool(self.outstanding or self.queued)


class _Channel:
    __slots__ = ("id", "cls", "streams", "files", "inflight", "draining", "closed", "counted_busy", "counted_extra")

    def __init__(self, cid: int, cls: SizeClass):
        self.id = cid
        self.cls = cls
        self.streams: list[_Stream] = []
        self.files = 0
        self.inflight = 0  # bytes requested but not yet delivered, across all streams
        self.draining = False
        self.closed = False
        self.counted_busy = False
        self.counted_extra = 0


class _Group:
    __slots__ = ("cls", "pending", "params", "target", "channels", "stats")

    def __init__(self, sub: SubGroup, params: TransferParams):
        self.cls = sub.cls
        self.pending: deque[FileEntry] = deque(sub.files)
        self.params = params
        self.target = params.concurrency
        self.channels: list[_Channel] = []
        self.stats = GroupStats(files_total=sub.count, bytes_total=sub.total_bytes)


class SimulatedTransport(Transport):
    """Event-driven transport over a simulated path; single-threaded and deterministic."""

    def __init__(
        self,
        profile: SimProfile = DEFAULT_PROFILE,
        seed: int = 0,
        record_events: bool = False,
        record_timeline: bool = False,
    ):
        self.profile = profile
        self.seed = seed
        self.record_events = record_events
        self.record_timeline = record_timeline
        self._rng = np.random.default_rng(seed)
        self._bw = profile.bandwidth / 8.0  # bytes/s
        self._bdp = profile.bdp()
        self._cap = profile.tcp_buffer / profile.rtt if profile.tcp_buffer else _INF
        self.clock = SimClock()
        self._groups: dict[SizeClass, _Group] = {}
        self._next_channel = 0
        # processor-sharing state: uncapped / window-capped classes with virtual clocks
        self._heap_u: list = []
        self._heap_c: list = []
        self._vu = 0.0
        self._vc = 0.0
        self._seq = 0
        self._busy_channels = 0
        self._extra_streams = 0
        self._bytes = 0.0
        self._energy = 0.0
        self._next_sample = 0.0
        self._samples: list[UtilizationSample] = []
        self._events: list[TransferEvent] = []
        self._sample_mark = self._event_mark = 0
        self._drained: list[SizeClass] = []
        self._completed: list[SizeClass] = []
        self.timeline: list[tuple[float, float, float]] = []  # (t0, t1, watts)
        self.max_open_channels = 0
        self.max_rate_sum = 0.0
        self.max_outstanding: dict[SizeClass, int] = {}
        self._started = False

    # -- Transport contract -------------------------------------------------------------

    @property
    def now(self) -> float:
        return self.clock.now

    @property
    def done(self) -> bool:
        return self._started and all(
            g.stats.files_done + g.stats.files_failed >= g.stats.files_total for g in self._groups.values()
        )

    def pending(self, cls: SizeClass) -> int:
        g = self._groups.get(cls)
        return len(g.pending) if g else 0

    def group_stats(self) -> dict[SizeClass, GroupStats]:
        return {c: replace(g.stats) for c, g in self._groups.items()}

    def open_channels(self) -> int:
        return sum(len(g.channels) for g in self._groups.values())

    def start(self, groups: Groups, params: Mapping[SizeClass, TransferParams]) -> None:
        if self._started:
            raise RuntimeError("transport already started")
        for c in SMALL_TO_LARGE:
            sub = groups.get(c)
            if sub:
                self._groups[c] = _Group(sub, params.get(c, TransferParams()))
        self._started = True
        self._take_sample()
        self._rebalance()

    def configure(self, params: Mapping[SizeClass, TransferParams]) -> None:
        for c, p in params.items():
            g = self._groups.get(c)
            if g is None:
                continue
            g.params = p
            g.target = p.concurrency
        self._rebalance()

    def run(self, duration: float | None = None) -> WindowReport:
        if not self._started:
            raise RuntimeError("start() first")
        t0, b0, e0 = self.now, self._bytes, self._energy
        # anything recorded since the last report (including by start()) belongs to this one
        n_samples, n_events = self._sample_mark, self._event_mark
        limit = _INF if duration is None else t0 + duration
        # drains raised by configure() are reported before any time passes
        while not self.done and not self._drained:
            t_next, kind = self._next_event()
            if t_next > limit:
                self._advance(limit)
                break
            if t_next == _INF:
                break  # nothing can make progress under the current grants
            self._advance(t_next)
            self._handle(kind)
        if self._samples and self._samples[-1].timestamp < self.now:
            self._take_sample(reschedule=False)  # boundary sample closes the window
        drained, completed = tuple(self._drained), tuple(self._completed)
        self._drained, self._completed = [], []
        self._sample_mark, self._event_mark = len(self._samples), len(self._events)
        return WindowReport(
            start=t0,
            end=self.now,
            bytes_moved=self._bytes - b0,
            energy=self._energy - e0,
            samples=self._samples[n_samples:],
            drained=drained,
            completed=completed,
            events=self._events[n_events:],
            done=self.done,
        )

    # -- bookkeeping ---------------------------------------------------------------------

    @property
    def energy(self) -> float:
        return self._energy

    @property
    def bytes_delivered(self) -> float:
        return self._bytes

    @property
    def samples(self) -> list[UtilizationSample]:
        return list(self._samples)

    @property
    def events(self) -> list[TransferEvent]:
        return list(self._events)

    def power(self) -> float:
        p = self.profile
        return p.idle_power + p.per_channel_power * self._busy_channels + p.per_parallel_power * self._extra_streams

    def _rates(self) -> tuple[float, float]:
        n = len(self._heap_u) + len(self._heap_c)
        if n == 0:
            return 0.0, 0.0
        share = self._bw / n
        return share, min(share, self._cap)

    def _delivery_rate(self) -> float:
        ru, rc = self._rates()
        return ru * len(self._heap_u) + rc * len(self._heap_c)

    def _emit(self, kind: EventKind, **kw) -> None:
        if self.record_events:
            self._events.append(TransferEvent(kind, self.now, **kw))

    def _take_sample(self, reschedule: bool = True) -> None:
        p = self.profile
        dyn = self.power() - p.idle_power
        self._samples.append(
            UtilizationSample(
                timestamp=self.now,
                cpu=min(1.0, dyn / p.dynamic_power_scale),
                nic=min(1.0, self._delivery_rate() / self._bw) if self._bw else 0.0,
            )
        )
        if reschedule:
            self._next_sample = self.now + p.sample_period

    # -- event loop -----------------------------------------------------------------------

    def _next_event(self) -> tuple[float, str]:
        best, kind = self.clock.peek_time(), "latency"
        ru, rc = self._rates()
        if self._heap_u:
            t = self.now + max(0.0, self._heap_u[0][0] - self._vu) / ru
            if t < best:
                best, kind = t, "data_u"
        if self._heap_c:
            t = self.now + max(0.0, self._heap_c[0][0] - self._vc) / rc
            if t < best:
                best, kind = t, "data_c"
        return best, kind

    def _advance(self, t: float) -> None:
        while self._next_sample <= t:
            self._advance_to(self._next_sample)
            self._take_sample()
        self._advance_to(t)

    def _advance_to(self, t: float) -> None:
        dt = t - self.clock.now
        if dt <= 0:
            return
        ru, rc = self._rates()
        nu, nc = len(self._heap_u), len(self._heap_c)
        self._vu += ru * dt
        self._vc += rc * dt
        rate = ru * nu + rc * nc
        self._bytes += rate * dt
        if rate > self.max_rate_sum:
            self.max_rate_sum = rate
        w = self.power()
        self._energy += w * dt
        if self.record_timeline:
            self.timeline.append((self.clock.now, t, w))
        self.clock.now = t

    def _handle(self, kind: str) -> None:
        if kind == "latency":
            _, stream = self.clock.pop()
            self._begin_data(stream)
        else:
            heap = self._heap_u if kind == "data_u" else self._heap_c
            _, _, stream = heapq.heappop(heap)
            self._finish_head(stream)

    def _begin_data(self, s: _Stream) -> None:
        req = s.outstanding[0]
        s.in_data = True
        s.capped = self.profile.tcp_buffer is not None and req.length > self.profile.tcp_buffer
        self._seq += 1
        if s.capped:
            heapq.heappush(self._heap_c, (self._vc + req.length, self._seq, s))
        else:
            heapq.heappush(self._heap_u, (self._vu + req.length, self._seq, s))

    def _latency(self) -> float:
        rtt = self.profile.rtt
        if self.profile.jitter:
            rtt *= 1.0 + self.profile.jitter * float(self._rng.uniform(-1.0, 1.0))
        return rtt

    def _schedule_head(self, s: _Stream) -> None:
        req = s.outstanding[0]
        start = max(req.issued + self._latency(), self.now) + self.profile.per_request_overhead
        self.clock.push(start, s.channel.id, s)

    def _issue(self, s: _Stream) -> None:
        g = self._groups[s.channel.cls]
        pp = g.params.pipelining
        while s.queued and len(s.outstanding) < pp and (not s.outstanding or s.channel.inflight < self._bdp):
            req = s.queued.popleft()
            req.issued = self.now
            s.outstanding.append(req)
            s.channel.inflight += req.length
            if len(s.outstanding) == 1:
                self._schedule_head(s)
        n = len(s.outstanding)
        if n > self.max_outstanding.get(g.cls, 0):
            self.max_outstanding[g.cls] = n

    def _finish_head(self, s: _Stream) -> None:
        req = s.outstanding.popleft()
        s.channel.inflight -= req.length
        s.in_data = False
        f = req.file
        f.done_bytes += req.length
        f.ranges_left -= 1
        ch = s.channel
        g = self._groups[ch.cls]
        self._emit(EventKind.BYTES_PROGRESS, file_id=f.entry.id, nbytes=req.length, group=ch.cls)
        if f.ranges_left == 0:
            ch.files -= 1
            g.stats.files_done += 1
            g.stats.bytes_done += f.done_bytes
            self._emit(EventKind.FILE_COMPLETE, file_id=f.entry.id, nbytes=f.done_bytes, group=ch.cls)
            if g.stats.files_done + g.stats.files_failed >= g.stats.files_total:
                g.stats.completed_at = self.now
                self._completed.append(g.cls)
                self._emit(EventKind.SUBGROUP_COMPLETE, group=g.cls)
        if s.outstanding:
            self._schedule_head(s)
        self._issue(s)
        self._admit(ch)
        self._refresh_power(ch)
        if ch.files == 0 and (ch.draining or not g.pending):
            self._close(ch)
            self._rebalance()

    # -- channels ---------------------------------------------------------------------------

    def _refresh_power(self, ch: _Channel) -> None:
        busy = ch.files > 0
        extra = max(0, sum(1 for s in ch.streams if s.busy) - 1) if busy else 0
        self._busy_channels += int(busy) - int(ch.counted_busy)
        self._extra_streams += extra - ch.counted_extra
        ch.counted_busy, ch.counted_extra = busy, extra

    def _admit(self, ch: _Channel) -> None:
        g = self._groups[ch.cls]
        pp, p = g.params.pipelining, g.params.parallelism
        admitted = False
        # like issuing, admission stops once a full BDP is already outstanding, so a
        # channel does not hoard files it cannot have in flight
        while not ch.draining and ch.files < pp and g.pending and (ch.files == 0 or self._room(ch)):
            entry = g.pending.popleft()
            if not g.pending:
                self._drained.append(g.cls)
            f = _File(entry, g.cls)
            n = min(p, entry.size)
            base, extra = divmod(entry.size, n)
            while len(ch.streams) < n:
                ch.streams.append(_Stream(ch, len(ch.streams)))
            f.ranges_left = n
            for i in range(n):
                ch.streams[i].queued.append(_Req(f, base + (1 if i < extra else 0)))
            ch.files += 1
            admitted = True
            for i in range(n):
                self._issue(ch.streams[i])
        if admitted:
            self._refresh_power(ch)

    def _room(self, ch: _Channel) -> bool:
        return ch.inflight < self._bdp

    def _open(self, g: _Group) -> None:
        ch = _Channel(self._next_channel, g.cls)
        self._next_channel += 1
        g.channels.append(ch)
        self._admit(ch)
        if ch.files == 0:
            self._close(ch)
        self.max_open_channels = max(self.max_open_channels, self.open_channels())

    def _close(self, ch: _Channel) -> None:
        if ch.closed:
            return
        ch.closed = True
        self._refresh_power(ch)
        self._groups[ch.cls].channels.remove(ch)

    def _rebalance(self) -> None:
        groups = [self._groups[c] for c in SMALL_TO_LARGE if c in self._groups]
        for g in groups:
            live = [ch for ch in g.channels if not ch.draining]
            if len(live) > g.target:
                for ch in sorted(live, key=lambda c: -c.id)[: len(live) - g.target]:
                    ch.draining = True
                    if ch.files == 0:
                        self._close(ch)
            elif len(live) < g.target:
                for ch in sorted((c for c in g.channels if c.draining), key=lambda c: c.id)[: g.target - len(live)]:
                    ch.draining = False
                    self._admit(ch)
        budget = sum(g.target for g in groups)
        for g in groups:
            while (
                g.pending
                and sum(1 for ch in g.channels if not ch.draining) < g.target
                and self.open_channels() < budget
            ):
                self._open(g)


# -- public helpers -------------------------------------------------------------------


def simulate_transfer(
    plan: TransferPlan,
    dataset: Sequence[FileEntry] | None = None,
    sim_profile: SimProfile = DEFAULT_PROFILE,
    seed: int = 0,
    window_secs: float = DEFAULT_WINDOW_SECS,
    record_timeline: bool = False,
    record_events: bool = False,
) -> tuple[TransferOutcome, SimulatedTransport]:
    """Execute a static plan on the simulator; returns the outcome and the transport for inspection."""
    if dataset is not None:
        want = sorted((f.id, f.size) for g in plan.groups.values() for f in g.files)
        if want != sorted((f.id, f.size) for f in dataset):
            raise ValueError("plan groups do not match the dataset")
    t = SimulatedTransport(sim_profile, seed=seed, record_timeline=record_timeline, record_events=record_events)
    out = execute_plan(plan, t, sim_profile.network_profile(), None, window_secs)
    return out, t


def forced_params(groups: Groups, pp: int, p: int) -> dict[SizeClass, TransferParams]:
    return {c: TransferParams(pp, p, 0) for c, g in groups.items() if g}


def throughput_energy_sweep(
    dataset: Sequence[FileEntry],
    sim_profile: SimProfile = DEFAULT_PROFILE,
    cc_range: Iterable[int] = range(1, 33),
    pp: int | None = None,
    p: int | None = None,
    seed: int = 0,
    pp_cap: int = DEFAULT_PIPELINING_CAP,
    window_secs: float = DEFAULT_WINDOW_SECS,
) -> list[EfficiencySample]:
    """One full simulated transfer per concurrency level (the brute-force reference).

    ``pp``/``p`` force pipelining and parallelism for every subgroup; when
    omitted each subgroup uses its planner-optimal values, which is what the
    efficiency search itself runs with.
    """
    levels = sorted(set(int(c) for c in cc_range))
    if not levels:
        raise ValueError("empty concurrency range")
    if levels[0] < 1:
        raise ValueError("concurrency levels must be >= 1")
    net = sim_profile.network_profile()
    groups = group_files(list(dataset), net)
    if pp is None and p is None:
        params = optimal_params(groups, net, pp_cap)
    else:
        opt = optimal_params(groups, net, pp_cap)
        params = {
            c: TransferParams(pp or o.pipelining, p or o.parallelism, 0) for c, o in opt.items()
        }
    out = []
    for cc in levels:
        t = SimulatedTransport(sim_profile, seed=seed)
        res = run_fixed_concurrency(groups, net, cc, t, None, window_secs, pp_cap, params=params)
        out.append(EfficiencySample.measure(cc, res.bytes_total, res.duration, res.energy))
    return out


def write_sweep_csv(samples: Sequence[EfficiencySample], path_or_fh, header_comment: str | None = None) -> None:
    import csv

    own = isinstance(path_or_fh, (str, Path))
    fh = open(path_or_fh, "w", newline="") if own else path_or_fh
    try:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["concurrency", "throughput_bps", "energy_j", "ratio"])
        for s in samples:
            w.writerow([s.concurrency, repr(s.window_throughput), repr(s.window_energy), repr(s.ratio)])
    finally:
        if own:
            fh.close()


# -- reference datasets ---------------------------------------------------------------

# (min, max) file size in bytes; volumes are sized to keep a 32-level efficiency
# search (nine 5 s windows at up to 1 Gbit/s) busy with data to spare.
REFERENCE_SHAPES = {
    "small": (300_000, 700_000),
    "medium": (2_000_000, 3_000_000),
    "large": (202_000_000, 249_000_000),
}
REFERENCE_VOLUME = 8_000_000_000


def reference_dataset(shape: str, total_bytes: int = REFERENCE_VOLUME, seed: int = 0) -> list[FileEntry]:
    """Uniformly sized files of one shape until ``total_bytes`` is reached."""
    if shape == "mixed":
        per = total_bytes // 3
        return [f for s in ("small", "medium", "large") for f in reference_dataset(s, per, seed)]
    lo, hi = REFERENCE_SHAPES[shape]
    rng = np.random.default_rng(seed)
    files, acc, i = [], 0, 0
    while acc < total_bytes:
        size = int(rng.integers(lo, hi + 1))
        files.append(FileEntry(f"/{shape}/{i:06d}", size))
        acc += size
        i += 1
    return files


def is_unimodal(values: Sequence[float], tol: float = 0.0) -> bool:
    """True when the sequence rises (weakly) to one peak and then falls (weakly)."""
    if not values:
        return False
    k = int(np.argmax(values))
    up = all(values[i + 1] >= values[i] - tol for i in range(k))
    down = all(values[i + 1] <= values[i] + tol for i in range(k, len(values) - 1))
    return up and down
