"""HTTP/1.1 transport: persistent connections, true pipelining, byte ranges.

* concurrency: one channel per granted slot, each channel a persistent
  connection (plus one extra connection per additional parallel stream);
* pipelining: each connection keeps up to ``pp`` GETs outstanding and reads
  the responses strictly in request order;
* parallelism: a file is split into ``p`` byte ranges, range ``i`` travels on
  the channel's stream ``i``, and every range is written straight into a
  preallocated destination file at its offset.

Each stream is a worker thread doing blocking request/response sequencing.
Workers share nothing but the scheduling state under one condition variable,
and report progress through a single queue that :meth:`HttpTransport.run`
consumes. Utilization samples from the optional telemetry sampler travel on
the same queue.

Failure policy: a broken connection is re-established once and its unanswered
requests are re-sent; a request that fails twice fails its file, which is
recorded and skipped while the rest of the transfer continues. A server that
drops the connection right after the first of several pipelined responses is
taken not to support pipelining, and that host falls back to ``pp = 1``. A
server that ignores ``Range`` is handled by writing the requested slice of the
full body, after which the host falls back to ``p = 1``.
"""
from __future__ import annotations

import hashlib
import logging
import os
import queue
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Callable, Iterable, Mapping, Sequence
from urllib.parse import unquote, urlsplit

from ..exceptions import PipelineUnsupported, TransportError, Unreachable
from ..planner import SMALL_TO_LARGE, FileEntry, Groups, SizeClass, TransferParams
from ..power import UtilizationSample
from ..telemetry import Sampler, UtilizationSampler
from .base import EventKind, GroupStats, Transport, TransferEvent, WindowReport, split_ranges

log = logging.getLogger(__name__)

CHUNK = 256 * 1024
USER_AGENT = "httpwatt/0.1"
RETRY_BUDGET = 1  # re-sends allowed per request after a connection failure


class ProtocolError(TransportError):
    pass


class _ConnectionLost(TransportError):
    pass


# -- URLs and wire format ------------------------------------------------------------


@dataclass(frozen=True)
class Target:
    host: str
    port: int
    path: str

    @property
    def hostport(self) -> tuple[str, int]:
        return self.host, self.port

    @property
    def host_header(self) -> str:
        return self.host if self.port == 80 else f"{self.host}:{self.port}"


def parse_url(url: str) -> Target:
    parts = urlsplit(url)
    if parts.scheme != "http":
        raise ValueError(f"{url}: only http:// URLs are supported")
    if not parts.hostname:
        raise ValueError(f"{url}: missing host")
    path = parts.path or "/"
    if parts.query:
        path += "?" + parts.query
    return Target(parts.hostname, parts.port or 80, path)


def resolve_url(file_id: str, base_url: str | None) -> str:
    if file_id.startswith("http://") or file_id.startswith("https://"):
        return file_id
    if base_url is None:
        raise ValueError(f"{file_id}: relative file id and no base URL")
    return base_url.rstrip("/") + "/" + file_id.lstrip("/")


def destination_path(root: Path, url: str) -> Path:
    """Output location mirroring the URL path under ``root``; never escapes it."""
    raw = unquote(urlsplit(url).path)
    parts = [p for p in PurePosixPath(raw).parts if p not in ("/", "", ".", "..")]
    if not parts:
        parts = ["index"]
    return root.joinpath(*parts)


def build_request(method: str, target: Target, extra: Mapping[str, str] | None = None) -> bytes:
    lines = [
        f"{method} {target.path} HTTP/1.1",
        f"Host: {target.host_header}",
        f"User-Agent: {USER_AGENT}",
        "Connection: keep-alive",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1")


@dataclass
class ResponseHead:
    status: int
    reason: str
    headers: dict[str, str]

    def get(self, name: str, default=None):
        return self.headers.get(name.lower(), default)

    @property
    def content_length(self) -> int | None:
        v = self.get("content-length")
        if v is None:
            return None
        try:
            n = int(v.strip())
        except ValueError:
            raise ProtocolError(f"bad Content-Length {v!r}") from None
        if n < 0:
            raise ProtocolError(f"negative Content-Length {n}")
        return n

    @property
    def chunked(self) -> bool:
        return "chunked" in self.get("transfer-encoding", "").lower()

    @property
    def will_close(self) -> bool:
        return "close" in self.get("connection", "").lower()

    def content_range(self) -> tuple[int, int, int | None] | None:
        """(first, last, total) from ``Content-Range: bytes a-b/n``."""
        v = self.get("content-range")
        if v is None:
            return None
        try:
            unit, spec = v.strip().split(" ", 1)
            span, total = spec.split("/", 1)
            a, b = span.split("-", 1)
            if unit.lower() != "bytes":
                raise ValueError
            return int(a), int(b), (None if total.strip() == "*" else int(total))
        except ValueError:
            raise ProtocolError(f"bad Content-Range {v!r}") from None


def read_head(rfile) -> ResponseHead:
    line = rfile.readline(65537)
    if not line:
        raise _ConnectionLost("connection closed before status line")
    try:
        version, rest = line.decode("latin-1").rstrip("\r\n").split(" ", 1)
        code, _, reason = rest.partition(" ")
        status = int(code)
    except ValueError:
        raise ProtocolError(f"bad status line {line[:80]!r}") from None
    if not version.startswith("HTTP/1."):
        raise ProtocolError(f"unsupported protocol {version!r}")
    headers: dict[str, str] = {}
    while True:
        h = rfile.readline(65537)
        if not h:
            raise _ConnectionLost("connection closed inside headers")
        if h in (b"\r\n", b"\n"):
            break
        name, sep, value = h.decode("latin-1").partition(":")
        if not sep:
            raise ProtocolError(f"bad header line {h[:80]!r}")
        key = name.strip().lower()
        value = value.strip()
        headers[key] = f"{headers[key]}, {value}" if key in headers else value
    return ResponseHead(status, reason, headers)


def _read_exact(rfile, n: int, sink: Callable[[bytes], None]) -> None:
    left = n
    while left > 0:
        buf = rfile.read(min(CHUNK, left))
        if not buf:
            raise _ConnectionLost(f"connection closed with {left} body bytes outstanding")
        sink(buf)
        left -= len(buf)


def read_body(rfile, head: ResponseHead, method: str, sink: Callable[[bytes], None]) -> bool:
    """Stream the body into ``sink``; returns False when the connection must not be reused."""
    if method == "HEAD" or head.status in (204, 304) or 100 <= head.status < 200:
        return not head.will_close
    if head.chunked:
        while True:
            line = rfile.readline(1024)
            if not line:
                raise _ConnectionLost("connection closed inside chunked body")
            try:
                size = int(line.split(b";", 1)[0].strip(), 16)
            except ValueError:
                raise ProtocolError(f"bad chunk size line {line[:40]!r}") from None
            if size == 0:
                while True:  # trailers
                    t = rfile.readline(65537)
                    if not t or t in (b"\r\n", b"\n"):
                        break
                return not head.will_close
            _read_exact(rfile, size, sink)
            if rfile.readline(3) not in (b"\r\n", b"\n"):
                raise ProtocolError("missing CRLF after chunk")
    n = head.content_length
    if n is not None:
        _read_exact(rfile, n, sink)
        return not head.will_close
    while True:  # delimited by connection close
        buf = rfile.read1(CHUNK) if hasattr(rfile, "read1") else rfile.read(CHUNK)
        if not buf:
            return False
        sink(buf)


class Connection:
    """One persistent HTTP/1.1 connection."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise Unreachable(f"{host}:{port}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.rfile = self.sock.makefile("rb", buffering=CHUNK)
        self.sent = 0
        self.responses = 0

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise _ConnectionLost(f"send failed: {exc}") from exc
        self.sent += 1

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.rfile.close()
        finally:
            self.sock.close()


# -- capability probing ---------------------------------------------------------------


@dataclass
class HostCapabilities:
    host: str
    port: int
    range_supported: bool = False
    keep_alive: bool = True
    head_allowed: bool = True
    pipelining: bool = True  # cleared when the server is caught dropping pipelined requests

    @property
    def hostport(self) -> tuple[str, int]:
        return self.host, self.port


@dataclass(frozen=True)
class ProbeResult:
    capabilities: HostCapabilities
    size: int | None


def _head_or_get(target: Target, timeout: float) -> tuple[ResponseHead, bool]:
    """HEAD the target; on 405 fall back to a one-byte ranged GET. Returns (head, used_get)."""
    conn = Connection(target.host, target.port, timeout)
    try:
        conn.send(build_request("HEAD", target))
        head = read_head(conn.rfile)
        if head.status != 405:
            return head, False
    except (_ConnectionLost, ProtocolError, OSError) as exc:
        raise Unreachable(f"{target.host}:{target.port}: probe failed: {exc}") from exc
    finally:
        conn.close()
    conn = Connection(target.host, target.port, timeout)
    try:
        conn.send(build_request("GET", target, {"Range": "bytes=0-0"}))
        return read_head(conn.rfile), True  # body is abandoned with the connection
    except (_ConnectionLost, ProtocolError, OSError) as exc:
        raise Unreachable(f"{target.host}:{target.port}: probe failed: {exc}") from exc
    finally:
        conn.close()


def probe(url: str, timeout: float = 10.0) -> ProbeResult:
    """Capabilities of ``url``'s host plus the size of ``url`` itself (None when undiscoverable)."""
    t = parse_url(url)
    head, used_get = _head_or_get(t, timeout)
    caps = HostCapabilities(t.host, t.port, head_allowed=not used_get)
    if head.status >= 400:
        # the host answers but this file is missing, which says nothing about ranges;
        # assume they work, a 200 reply to a ranged GET is handled if they do not
        caps.range_supported = True
        return ProbeResult(caps, None)
    caps.keep_alive = not head.will_close
    cr = head.content_range() if head.status == 206 else None
    if cr is not None:
        caps.range_supported = True
        size = cr[2]
    else:
        caps.range_supported = "bytes" in head.get("accept-ranges", "").lower()
        size = head.content_length
    if size == 0:
        size = None
    return ProbeResult(caps, size)


def probe_capabilities(url: str, timeout: float = 10.0) -> HostCapabilities:
    return probe(url, timeout).capabilities


def discover_sizes(
    files: Sequence[FileEntry], base_url: str | None = None, timeout: float = 10.0
) -> tuple[list[FileEntry], list[str]]:
    """Backfill unknown sizes by probing; returns the new entries and warnings for sizes still unknown."""
    out, warnings = [], []
    for f in files:
        if f.size is not None:
            out.append(f)
            continue
        r = probe(resolve_url(f.id, base_url), timeout)
        if r.size is None:
            warnings.append(f"{f.id}: size unknown (no Content-Length); grouped as medium")
        out.append(FileEntry(f.id, r.size))
    return out, warnings


# -- transfer engine ---------------------------------------------------------------------


class ChannelState(str, Enum):
    IDLE = "idle"
    CONNECTING = "connecting"
    BUSY = "busy"
    CLOSED = "closed"


class _Job:
    __slots__ = ("entry", "cls", "url", "target", "dest", "channel", "ranges_left", "bytes", "finished", "failed")

    def __init__(self, entry: FileEntry, cls: SizeClass, url: str, dest: Path, channel: "_Channel"):
        self.entry = entry
        self.cls = cls
        self.url = url
        self.target = parse_url(url)
        self.dest = dest
        self.channel = channel
        self.ranges_left = 0
        self.bytes = 0
        self.finished = False
        self.failed = False


class _Req:
    __slots__ = ("job", "offset", "length", "ranged", "attempts")

    def __init__(self, job: _Job, offset: int, length: int | None, ranged: bool):
        self.job = job
        self.offset = offset
        self.length = length
        self.ranged = ranged
        self.attempts = 0

    def wire(self) -> bytes:
        extra = {"Range": f"bytes={self.offset}-{self.offset + self.length - 1}"} if self.ranged else None
        return build_request("GET", self.job.target, extra)


class _Stream:
    __slots__ = ("channel", "index", "queue", "conn", "thread", "outstanding")

    def __init__(self, channel: "_Channel", index: int):
        self.channel = channel
        self.index = index
        self.queue: deque[_Req] = deque()
        self.conn: Connection | None = None
        self.thread: threading.Thread | None = None
        self.outstanding = 0


class _Channel:
    def __init__(self, cid: int, cls: SizeClass):
        self.id = cid
        self.cls = cls
        self.streams: list[_Stream] = []
        self.files = 0
        self.draining = False
        self.state = ChannelState.IDLE

    @property
    def closed(self) -> bool:
        return self.state is ChannelState.CLOSED


class _Group:
    def __init__(self, cls: SizeClass, files: Iterable[FileEntry], params: TransferParams):
        files = list(files)
        self.cls = cls
        self.pending: deque[FileEntry] = deque(files)
        self.params = params
        self.target = params.concurrency
        self.channels: list[_Channel] = []
        self.stats = GroupStats(files_total=len(files), bytes_total=sum(f.size or 0 for f in files))


_WAKE = object()


class HttpTransport(Transport):
    """Real transfers over HTTP/1.1.

    ``base_url`` resolves relative file ids; absolute ``http://`` ids are used
    as is. Files land under ``out_root`` mirroring their URL paths. With
    ``sampler`` set, host utilization is sampled in the background and the
    samples are attached to every :class:`WindowReport`; this transport has no
    energy meter of its own, so ``WindowReport.energy`` is always None.
    """

    def __init__(
        self,
        out_root: str | Path,
        base_url: str | None = None,
        verify: bool = False,
        sampler: UtilizationSampler | None = None,
        sample_period: float = 1.0,
        timeout: float = 30.0,
        record_events: bool = True,
        probe_hosts: bool = True,
    ):
        self.out_root = Path(out_root)
        self.base_url = base_url
        self.verify = verify
        self.timeout = timeout
        self.record_events = record_events
        self.probe_hosts = probe_hosts
        self._cond = threading.Condition(threading.RLock())
        self._queue: queue.Queue = queue.Queue()
        self._groups: dict[SizeClass, _Group] = {}
        self._hosts: dict[tuple[str, int], HostCapabilities] = {}
        self._next_channel = 0
        self._drained: list[SizeClass] = []
        self._completed: list[SizeClass] = []
        self._failures: list[str] = []
        self._threads: list[threading.Thread] = []
        self._closing = False
        self._started = False
        self._t0 = time.monotonic()
        self._sampler_src = sampler
        self._sample_period = sample_period
        self._sampler: Sampler | None = None
        self.max_outstanding: dict[SizeClass, int] = {}
        self.max_open_channels = 0
        self.warnings: list[str] = []
        self._range_warned: set[tuple[str, int]] = set()
        self.progress: list[tuple[float, int]] = []  # (timestamp, bytes) as consumed by run()

    # -- Transport contract ------------------------------------------------------------

    @property
    def now(self) -> float:
        return time.monotonic() - self._t0

    @property
    def done(self) -> bool:
        with self._cond:
            return self._started and all(
                g.stats.files_done + g.stats.files_failed >= g.stats.files_total for g in self._groups.values()
            )

    def pending(self, cls: SizeClass) -> int:
        with self._cond:
            g = self._groups.get(cls)
            return len(g.pending) if g else 0

    def group_stats(self) -> dict[SizeClass, GroupStats]:
        with self._cond:
            return {c: replace(g.stats) for c, g in self._groups.items()}

    def open_channels(self) -> int:
        with self._cond:
            return sum(len(g.channels) for g in self._groups.values())

    def failures(self) -> list[str]:
        with self._cond:
            return list(self._failures)

    @property
    def samples(self) -> list[UtilizationSample]:
        return self._sampler.snapshot() if self._sampler is not None else []

    def host_capabilities(self) -> dict[tuple[str, int], HostCapabilities]:
        with self._cond:
            return {k: replace(v) for k, v in self._hosts.items()}

    def start(self, groups: Groups, params: Mapping[SizeClass, TransferParams]) -> None:
        if self._started:
            raise RuntimeError("transport already started")
        self.out_root.mkdir(parents=True, exist_ok=True)
        first_by_host: dict[tuple[str, int], str] = {}
        for c in SMALL_TO_LARGE:
            for f in (groups.get(c).files if groups.get(c) else ()):
                url = resolve_url(f.id, self.base_url)
                first_by_host.setdefault(parse_url(url).hostport, url)
        for hp, url in first_by_host.items():
            if self.probe_hosts:
                caps = probe_capabilities(url, self.timeout)  # raises Unreachable
            else:
                caps = HostCapabilities(*hp, range_supported=True)
            self._hosts[hp] = caps
        self._t0 = time.monotonic()
        if self._sampler_src is not None:
            self._sampler_src.clock = lambda: self.now
            self._sampler = Sampler(self._sampler_src, self._sample_period, sink=self._queue)
            self._sampler.start()
        with self._cond:
            for c in SMALL_TO_LARGE:
                sub = groups.get(c)
                if sub:
                    self._groups[c] = _Group(c, sub.files, params.get(c, TransferParams()))
            self._started = True
            self._rebalance()

    def configure(self, params: Mapping[SizeClass, TransferParams]) -> None:
        with self._cond:
            for c, p in params.items():
                g = self._groups.get(c)
                if g is not None:
                    g.params = p
                    g.target = p.concurrency
            self._rebalance()
            self._cond.notify_all()

    def run(self, duration: float | None = None) -> WindowReport:
        if not self._started:
            raise RuntimeError("start() first")
        t0 = self.now
        deadline = None if duration is None else time.monotonic() + duration
        moved = 0
        events: list[TransferEvent] = []
        samples: list[UtilizationSample] = []

        def consume(item) -> None:
            nonlocal moved
            if isinstance(item, UtilizationSample):
                samples.append(item)
            elif isinstance(item, TransferEvent):
                if item.kind is EventKind.BYTES_PROGRESS:
                    moved += item.nbytes
                    self.progress.append((item.timestamp, item.nbytes))
                if self.record_events:
                    events.append(item)

        while True:
            with self._cond:
                if self._drained or self.done or self._stalled():
                    break
            wait = 0.05
            if deadline is not None:
                wait = min(wait, deadline - time.monotonic())
                if wait <= 0:
                    break
            try:
                consume(self._queue.get(timeout=wait))
            except queue.Empty:
                pass
        if self._sampler is not None:
            self._sampler.sample_now()  # close the window with a sample on its edge
        while True:
            try:
                consume(self._queue.get_nowait())
            except queue.Empty:
                break
        with self._cond:
            drained, completed = tuple(self._drained), tuple(self._completed)
            self._drained, self._completed = [], []
            done = self.done
        return WindowReport(
            start=t0,
            end=self.now,
            bytes_moved=moved,
            energy=None,
            samples=samples,
            drained=drained,
            completed=completed,
            events=events,
            done=done,
        )

    def close(self) -> None:
        with self._cond:
            self._closing = True
            streams = [s for g in self._groups.values() for ch in g.channels for s in ch.streams]
            self._cond.notify_all()
        for s in streams:
            if s.conn is not None:
                s.conn.close()
        for t in list(self._threads):
            t.join(timeout=5.0)
        if self._sampler is not None:
            self._sampler.stop()

    # -- scheduling (all under self._cond) -------------------------------------------------

    def _stalled(self) -> bool:
        return (
            not self.done
            and sum(len(g.channels) for g in self._groups.values()) == 0
            and all(g.target == 0 or not g.pending for g in self._groups.values())
        )

    def _emit(self, kind: EventKind, **kw) -> None:
        self._queue.put(TransferEvent(kind, self.now, **kw))

    def _warn(self, msg: str) -> None:
        log.warning(msg)
        self.warnings.append(msg)
        self._emit(EventKind.WARNING, detail=msg)

    def _rebalance(self) -> None:
        if self._closing:
            return
        groups = [self._groups[c] for c in SMALL_TO_LARGE if c in self._groups]
        for g in groups:
            live = [ch for ch in g.channels if not ch.draining]
            if len(live) > g.target:
                for ch in sorted(live, key=lambda c: -c.id)[: len(live) - g.target]:
                    ch.draining = True
                    if ch.files == 0:
                        self._close_channel(ch)
            elif len(live) < g.target:
                for ch in sorted((c for c in g.channels if c.draining), key=lambda c: c.id)[: g.target - len(live)]:
                    ch.draining = False
        budget = sum(g.target for g in groups)
        for g in groups:
            while (
                g.pending
                and sum(1 for ch in g.channels if not ch.draining) < g.target
                and sum(len(x.channels) for x in groups) < budget
            ):
                self._open_channel(g)
        self._cond.notify_all()

    def _open_channel(self, g: _Group) -> None:
        ch = _Channel(self._next_channel, g.cls)
        self._next_channel += 1
        g.channels.append(ch)
        self._admit(ch)
        if ch.files == 0:
            self._close_channel(ch)
        self.max_open_channels = max(self.max_open_channels, sum(len(x.channels) for x in self._groups.values()))

    def _close_channel(self, ch: _Channel) -> None:
        if ch.closed:
            return
        ch.state = ChannelState.CLOSED
        self._groups[ch.cls].channels.remove(ch)
        self._cond.notify_all()

    def _caps(self, target: Target) -> HostCapabilities:
        caps = self._hosts.get(target.hostport)
        if caps is None:
            caps = self._hosts[target.hostport] = HostCapabilities(target.host, target.port, range_supported=True)
        return caps

    def _admit(self, ch: _Channel) -> None:
        g = self._groups[ch.cls]
        while not ch.draining and not ch.closed and ch.files < g.params.pipelining and g.pending:
            entry = g.pending.popleft()
            if not g.pending:
                self._drained.append(g.cls)
                self._queue.put(_WAKE)
            url = resolve_url(entry.id, self.base_url)
            job = _Job(entry, g.cls, url, destination_path(self.out_root, url), ch)
            try:
                job.dest.parent.mkdir(parents=True, exist_ok=True)
                with open(job.dest, "wb") as fh:
                    if entry.size:
                        fh.truncate(entry.size)
            except OSError as exc:
                ch.files += 1
                self._fail_job(job, f"cannot create destination: {exc}")
                continue
            caps = self._caps(job.target)
            p = g.params.parallelism
            if entry.size is None:
                reqs = [_Req(job, 0, None, False)]
            else:
                if p > 1 and not caps.range_supported:
                    p = 1
                    if caps.hostport not in self._range_warned:
                        self._range_warned.add(caps.hostport)
                        self._warn(f"{caps.host}:{caps.port} does not support byte ranges; using p=1")
                ranges = split_ranges(entry, p, ch.id)
                ranged = len(ranges) > 1
                reqs = [_Req(job, r.offset, r.length, ranged) for r in ranges]
            job.ranges_left = len(reqs)
            while len(ch.streams) < len(reqs):
                self._spawn_stream(ch)
            for s, r in zip(ch.streams, reqs):
                s.queue.append(r)
            ch.files += 1
            ch.state = ChannelState.BUSY
        self._cond.notify_all()

    def _spawn_stream(self, ch: _Channel) -> None:
        s = _Stream(ch, len(ch.streams))
        ch.streams.append(s)
        t = threading.Thread(target=self._stream_main, args=(s,), name=f"httpwatt-ch{ch.id}.{s.index}", daemon=True)
        s.thread = t
        self._threads.append(t)
        t.start()

    def _pp_for(self, s: _Stream, req: _Req | None) -> int:
        pp = self._groups[s.channel.cls].params.pipelining
        if req is not None and not self._caps(req.job.target).pipelining:
            return 1
        return pp

    def _fail_job(self, job: _Job, reason: str) -> None:
        if job.finished:
            return
        job.finished = job.failed = True
        g = self._groups[job.cls]
        g.stats.files_failed += 1
        self._failures.append(f"{job.entry.id}: {reason}")
        for s in job.channel.streams:
            s.queue = deque(r for r in s.queue if r.job is not job)
        try:
            job.dest.unlink()  # no partial files left behind
        except OSError:
            pass
        self._emit(EventKind.FILE_FAILED, file_id=job.entry.id, group=job.cls, detail=reason)
        self._job_gone(job)

    def _job_gone(self, job: _Job) -> None:
        ch = job.channel
        g = self._groups[job.cls]
        ch.files -= 1
        if g.stats.files_done + g.stats.files_failed >= g.stats.files_total:
            g.stats.completed_at = self.now
            self._completed.append(g.cls)
            self._emit(EventKind.SUBGROUP_COMPLETE, group=g.cls)
        self._admit(ch)
        if ch.files == 0:
            ch.state = ChannelState.IDLE
            if ch.draining or not g.pending:
                self._close_channel(ch)
                self._rebalance()
        self._cond.notify_all()

    # -- worker ---------------------------------------------------------------------------

    def _next_batch(self, s: _Stream, inflight: deque) -> list[_Req] | None:
        """Requests to put on the wire now; None when the stream should exit."""
        with self._cond:
            while True:
                if self._closing:
                    return None
                ch = s.channel
                if not ch.closed:
                    self._admit(ch)
                batch = []
                while s.queue:
                    head = s.queue[0]
                    if len(inflight) + len(batch) >= self._pp_for(s, head):
                        break
                    batch.append(s.queue.popleft())
                if batch or inflight:
                    return batch
                if ch.closed:
                    return None
                self._cond.wait(0.5)

    def _stream_main(self, s: _Stream) -> None:
        inflight: deque[_Req] = deque()
        try:
            while True:
                batch = self._next_batch(s, inflight)
                if batch is None:
                    return
                try:
                    if batch:
                        if s.conn is None:
                            s.channel.state = ChannelState.CONNECTING
                            s.conn = Connection(*batch[0].job.target.hostport, timeout=self.timeout)
                            s.channel.state = ChannelState.BUSY
                        for r in batch:
                            inflight.append(r)
                            s.conn.send(r.wire())
                        with self._cond:
                            s.outstanding = len(inflight)
                            cls = s.channel.cls
                            self.max_outstanding[cls] = max(self.max_outstanding.get(cls, 0), len(inflight))
                    reusable = self._receive(s, inflight[0])
                    inflight.popleft()
                    if not reusable:
                        # orderly close after this response: later requests were never
                        # answered, so re-send them on a fresh connection at no retry cost
                        s.conn.close()
                        s.conn = None
                        with self._cond:
                            s.queue.extendleft(r for r in reversed(inflight) if not r.job.finished)
                            inflight.clear()
                    with self._cond:
                        s.outstanding = len(inflight)
                except (_ConnectionLost, ProtocolError, Unreachable, OSError) as exc:
                    self._connection_failed(s, inflight, exc)
        except Exception as exc:  # never leave the control loop waiting on a dead worker
            log.exception("stream worker crashed")
            with self._cond:
                for r in list(inflight) + list(s.queue):
                    self._fail_job(r.job, f"internal error: {exc}")
        finally:
            if s.conn is not None:
                s.conn.close()
                s.conn = None

    def _connection_failed(self, s: _Stream, inflight: deque, exc: Exception) -> None:
        conn, s.conn = s.conn, None
        answered = conn.responses if conn else 0
        pipelined = conn is not None and conn.sent > 1
        if conn is not None:
            conn.close()
        with self._cond:
            if self._closing:
                inflight.clear()
                return
            self._emit(EventKind.CHANNEL_ERROR, detail=f"channel {s.channel.id}.{s.index}: {exc}")
            head = inflight[0] if inflight else None
            caps = self._caps(head.job.target) if head else None
            if caps is not None and caps.pipelining and pipelined and answered == 1 and len(inflight) >= 1:
                caps.pipelining = False
                self._warn(str(PipelineUnsupported(f"{caps.host}:{caps.port} dropped pipelined requests; using pp=1")))
                retry = list(inflight)
            else:
                retry = []
                for r in inflight:
                    r.attempts += 1
                    if r.attempts > RETRY_BUDGET:
                        self._fail_job(r.job, f"retry budget exhausted: {exc}")
                    else:
                        retry.append(r)
            inflight.clear()
            s.queue.extendleft(r for r in reversed(retry) if not r.job.finished)
            s.outstanding = 0
            self._cond.notify_all()

    def _receive(self, s: _Stream, req: _Req) -> bool:
        """Read one response into place; returns whether the connection may be reused."""
        conn = s.conn
        job = req.job
        head = read_head(conn.rfile)
        conn.responses += 1
        written = 0
        if head.status >= 400:
            reusable = read_body(conn.rfile, head, "GET", lambda b: None)
            if head.status >= 500:
                raise ProtocolError(f"{job.entry.id}: server error {head.status}")
            with self._cond:
                self._fail_job(job, f"HTTP {head.status} {head.reason}")
            return reusable
        skip, take = 0, req.length
        if req.ranged and head.status == 200:
            skip = req.offset  # server ignored Range: keep our slice of the full body
            with self._cond:
                caps = self._caps(job.target)
                if caps.range_supported:
                    caps.range_supported = False
                    self._range_warned.add(caps.hostport)
                    self._warn(f"{caps.host}:{caps.port} ignores Range; falling back to p=1")
        elif req.ranged:
            if head.status != 206:
                raise ProtocolError(f"{job.entry.id}: expected 206, got {head.status}")
            cr = head.content_range()
            if cr is None or cr[0] != req.offset or cr[1] != req.offset + req.length - 1:
                raise ProtocolError(f"{job.entry.id}: Content-Range {head.get('content-range')!r} does not match request")
        elif head.status != 200:
            raise ProtocolError(f"{job.entry.id}: unexpected status {head.status}")

        try:
            fh = open(job.dest, "r+b")
        except OSError:
            if not job.finished:
                raise
            fh = None  # the file already failed elsewhere; drain the body and move on
        pos = 0  # offset inside the response body

        def sink(buf: bytes) -> None:
            nonlocal pos, written
            if fh is None:
                return
            lo, hi = pos, pos + len(buf)
            pos = hi
            if take is not None:
                a, b = max(lo, skip), min(hi, skip + take)
            else:
                a, b = lo, hi
            if b <= a:
                return
            fh.seek(req.offset + (a - skip))
            fh.write(buf[a - lo : b - lo])
            written += b - a
            self._queue.put(TransferEvent(EventKind.BYTES_PROGRESS, self.now, job.entry.id, b - a, job.cls))

        try:
            reusable = read_body(conn.rfile, head, "GET", sink)
        except BaseException:
            if written:  # undo the partial range so per-file progress still sums to the file size
                self._queue.put(TransferEvent(EventKind.BYTES_PROGRESS, self.now, job.entry.id, -written, job.cls))
            raise
        finally:
            if fh is not None:
                fh.close()
        if fh is None:
            return reusable
        if take is not None and written != take:
            self._queue.put(TransferEvent(EventKind.BYTES_PROGRESS, self.now, job.entry.id, -written, job.cls))
            raise ProtocolError(f"{job.entry.id}: got {written} bytes for a {take}-byte range")
        self._range_done(req, written)
        return reusable

    def _range_done(self, req: _Req, nbytes: int) -> None:
        job = req.job
        with self._cond:
            if job.finished:
                return
            job.bytes += nbytes
            job.ranges_left -= 1
            if job.ranges_left > 0:
                return
        reason = self._verify(job)
        with self._cond:
            if job.finished:
                return
            if reason:
                self._fail_job(job, reason)
                return
            job.finished = True
            g = self._groups[job.cls]
            g.stats.files_done += 1
            g.stats.bytes_done += job.bytes
            self._emit(EventKind.FILE_COMPLETE, file_id=job.entry.id, nbytes=job.bytes, group=job.cls)
            self._job_gone(job)

    def _verify(self, job: _Job) -> str | None:
        try:
            on_disk = os.path.getsize(job.dest)
        except OSError as exc:
            return f"destination vanished: {exc}"
        if job.entry.size is not None and (job.bytes != job.entry.size or on_disk != job.entry.size):
            return f"size mismatch: expected {job.entry.size}, received {job.bytes}"
        if self.verify:
            h = hashlib.sha256()
            with open(job.dest, "rb") as fh:
                for block in iter(lambda: fh.read(1 << 20), b""):
                    h.update(block)
            Path(str(job.dest) + ".sha256").write_text(f"{h.hexdigest()}  {job.dest.name}\n")
        return None
