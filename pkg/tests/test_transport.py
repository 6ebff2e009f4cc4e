import hashlib
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from httpwatt.exceptions import Unreachable
from httpwatt.planner import FileEntry, NetworkProfile, SizeClass, group_files
from httpwatt.power import PowerModel
from httpwatt.sla import execute_plan, plan_max_throughput, run_fixed_concurrency, run_max_throughput, run_min_energy
from httpwatt.telemetry import RawMetrics, SyntheticMetricsProvider, UtilizationSampler
from httpwatt.transport import EventKind, split_ranges
from httpwatt.transport.http import (
    HttpTransport,
    ProtocolError,
    ResponseHead,
    destination_path,
    discover_sizes,
    parse_url,
    probe,
    read_body,
    read_head,
    resolve_url,
)
from loopback import LoopbackServer

PROFILE = NetworkProfile(1e9, 0.001, 32 * 1024)  # BDP 125,000 bytes


def payloads(seed=0, sizes=(1, 3_000, 11_000, 40_000, 90_000, 130_000, 400_000)):
    rng = np.random.default_rng(seed)
    return {f"/data/f{i}.bin": rng.bytes(n) for i, n in enumerate(sizes)}


def entries(files, known=True):
    return [FileEntry(k, len(v) if known else None) for k, v in files.items()]


def assert_identical(out_dir, files):
    for name, body in files.items():
        got = (out_dir / name.lstrip("/")).read_bytes()
        assert hashlib.sha256(got).digest() == hashlib.sha256(body).digest(), name


def transfer(srv, files, out_dir, cc=3, pp=4, p=3, known=True, **kw):
    groups = group_files(entries(files, known), PROFILE)
    plan = plan_max_throughput(groups, PROFILE, cc).with_overrides(pipelining=pp, parallelism=p)
    with HttpTransport(out_dir, base_url=srv.base_url, **kw) as t:
        out = execute_plan(plan, t, PROFILE)
    return out, t


# -- range splitting ----------------------------------------------------------------------


@given(size=st.integers(1, 10**9), p=st.integers(1, 64))
def test_ranges_cover_the_file_exactly(size, p):
    rs = split_ranges(FileEntry("/f", size), p)
    assert len(rs) == min(p, size)
    assert rs[0].offset == 0 and rs[-1].end == size - 1
    assert all(a.end + 1 == b.offset for a, b in zip(rs, rs[1:]))
    lengths = [r.length for r in rs]
    assert max(lengths) - min(lengths) <= 1 and lengths == sorted(lengths, reverse=True)


def test_range_split_rejects_bad_input():
    with pytest.raises(ValueError):
        split_ranges(FileEntry("/f", 10), 0)
    with pytest.raises(ValueError):
        split_ranges(FileEntry("/f", None), 2)


# -- URLs and wire format ------------------------------------------------------------------


def test_urls():
    t = parse_url("http://example.org:8080/a/b?x=1")
    assert (t.host, t.port, t.path) == ("example.org", 8080, "/a/b?x=1")
    with pytest.raises(ValueError):
        parse_url("https://example.org/")
    assert resolve_url("/a/b", "http://h:1/") == "http://h:1/a/b"
    assert resolve_url("http://x/y", None) == "http://x/y"
    with pytest.raises(ValueError):
        resolve_url("a", None)


def test_destination_never_escapes_root(tmp_path):
    assert destination_path(tmp_path, "http://h/../../etc/passwd") == tmp_path / "etc" / "passwd"
    assert destination_path(tmp_path, "http://h/a%2F..%2F..%2Fx") == tmp_path / "a" / "x"
    assert destination_path(tmp_path, "http://h/") == tmp_path / "index"


def test_response_parsing():
    raw = (
        b"HTTP/1.1 206 Partial Content\r\nContent-Range: bytes 2-4/10\r\nContent-Length: 3\r\n\r\nabc"
        b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n2\r\nhi\r\n3;ext=1\r\nyou\r\n0\r\n\r\n"
        b"HTTP/1.1 200 OK\r\nConnection: close\r\n\r\ntail"
    )
    rf = io.BufferedReader(io.BytesIO(raw))
    out = []
    h = read_head(rf)
    assert h.status == 206 and h.content_range() == (2, 4, 10)
    assert read_body(rf, h, "GET", out.append) is True
    h = read_head(rf)
    assert h.chunked and read_body(rf, h, "GET", out.append) is True
    h = read_head(rf)
    assert h.will_close and read_body(rf, h, "GET", out.append) is False
    assert b"".join(out) == b"abchiyoutail"


def test_malformed_responses():
    with pytest.raises(ProtocolError):
        read_head(io.BufferedReader(io.BytesIO(b"garbage\r\n\r\n")))
    with pytest.raises(ProtocolError):
        ResponseHead(200, "OK", {"content-length": "-1"}).content_length
    with pytest.raises(ProtocolError):
        ResponseHead(206, "", {"content-range": "items 1-2/3"}).content_range()


# -- probing ---------------------------------------------------------------------------------


def test_probe_reads_size_and_capabilities(server_factory):
    srv = server_factory({"/a": b"x" * 1234})
    r = probe(srv.base_url + "/a")
    assert r.size == 1234 and r.capabilities.range_supported and r.capabilities.head_allowed
    no_ranges = server_factory({"/a": b"x" * 10}, ranges=False)
    assert not probe(no_ranges.base_url + "/a").capabilities.range_supported


def test_probe_falls_back_to_ranged_get_on_405(server_factory):
    srv = server_factory({"/a": b"y" * 777}, head_405=True)
    r = probe(srv.base_url + "/a")
    assert r.size == 777 and not r.capabilities.head_allowed and r.capabilities.range_supported


def test_discover_sizes_warns_for_unknown(server_factory):
    srv = server_factory({"/a": b"z" * 50}, omit_length=True)
    files, warnings = discover_sizes([FileEntry("/a", None), FileEntry("/b", 9)], srv.base_url)
    assert files == [FileEntry("/a", None), FileEntry("/b", 9)]
    assert len(warnings) == 1 and "/a" in warnings[0]


def test_unreachable_host(tmp_path):
    srv = LoopbackServer({})
    port = srv.port
    srv.close()
    groups = group_files([FileEntry("/a", 10)], PROFILE)
    with HttpTransport(tmp_path, base_url=f"http://127.0.0.1:{port}") as t:
        with pytest.raises(Unreachable):
            run_min_energy(groups, PROFILE, 1, t)


# -- transfers -------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "options",
    [{}, {"chunked": True}, {"omit_length": True}, {"head_405": True}, {"throttle": 4e6}],
    ids=["plain", "chunked", "close-delimited", "head-405", "throttled"],
)
def test_files_arrive_intact(server_factory, tmp_path, options):
    files = payloads()
    srv = server_factory(files, **options)
    out, t = transfer(srv, files, tmp_path)
    assert not out.failures
    assert_identical(tmp_path, files)
    assert out.bytes_total == sum(len(v) for v in files.values())


def test_pipelining_depth_is_bounded(server_factory, tmp_path):
    files = payloads(sizes=[2_000] * 30)
    srv = server_factory(files, respond_delay=0.002)
    out, t = transfer(srv, files, tmp_path, cc=1, pp=5, p=1)
    assert not out.failures
    assert srv.max_outstanding == 5
    assert t.max_outstanding[SizeClass.SMALL] == 5
    assert srv.connections <= 2  # probe plus one persistent channel


def test_parallel_ranges(server_factory, tmp_path):
    files = payloads(sizes=[500_000, 333_333])
    srv = server_factory(files)
    out, _ = transfer(srv, files, tmp_path, cc=1, pp=1, p=4)
    assert_identical(tmp_path, files)
    assert srv.range_requests == 8


def test_server_without_ranges_falls_back_to_single_stream(server_factory, tmp_path):
    files = payloads()
    srv = server_factory(files, ranges=False)
    out, t = transfer(srv, files, tmp_path, p=4)
    assert not out.failures
    assert_identical(tmp_path, files)
    assert srv.range_requests == 0
    assert any("byte ranges" in w for w in t.warnings)


def test_server_ignoring_range_header(server_factory, tmp_path):
    # the probe claims support, then every ranged GET is answered with the full body
    files = payloads(sizes=[300_000, 200_000])
    srv = server_factory(files)
    srv.opts.ranges = False
    groups = group_files(entries(files), PROFILE)
    plan = plan_max_throughput(groups, PROFILE, 1).with_overrides(pipelining=1, parallelism=3)
    with HttpTransport(tmp_path, base_url=srv.base_url, probe_hosts=False) as t:
        out = execute_plan(plan, t, PROFILE)
    assert not out.failures
    assert_identical(tmp_path, files)
    assert any("ignores Range" in w for w in t.warnings)


def test_dropped_connections_are_retried(server_factory, tmp_path):
    files = payloads(sizes=[5_000] * 12)
    srv = server_factory(files, kill_after=3)
    out, _ = transfer(srv, files, tmp_path, cc=2, pp=1, p=1)
    assert not out.failures
    assert_identical(tmp_path, files)


def test_pipelining_refused_downgrades_host(server_factory, tmp_path):
    files = payloads(sizes=[3_000] * 10)
    srv = server_factory(files, no_pipeline=True, respond_delay=0.005)
    out, t = transfer(srv, files, tmp_path, cc=1, pp=4, p=1)
    assert not out.failures
    assert_identical(tmp_path, files)
    assert any("pp=1" in w for w in t.warnings)
    assert not t.host_capabilities()[("127.0.0.1", srv.port)].pipelining


def test_unknown_sizes_are_fetched_whole(server_factory, tmp_path):
    files = payloads()
    srv = server_factory(files, omit_length=True)
    found, warnings = discover_sizes(entries(files, known=False), srv.base_url)
    assert len(warnings) == len(files)
    groups = group_files(found, PROFILE)
    assert set(c for c, g in groups.items() if g) == {SizeClass.MEDIUM}
    with HttpTransport(tmp_path, base_url=srv.base_url) as t:
        out = run_max_throughput(groups, PROFILE, 2, t)
    assert not out.failures
    assert_identical(tmp_path, files)


def test_missing_file_fails_alone(server_factory, tmp_path):
    files = payloads(sizes=[100, 200])
    srv = server_factory(files)
    wanted = entries(files) + [FileEntry("/data/missing.bin", 50)]
    with HttpTransport(tmp_path, base_url=srv.base_url, verify=True) as t:
        out = run_fixed_concurrency(group_files(wanted, PROFILE), PROFILE, 2, t)
    assert len(out.failures) == 1 and "missing.bin" in out.failures[0] and "404" in out.failures[0]
    assert not (tmp_path / "data" / "missing.bin").exists()
    assert_identical(tmp_path, files)
    for name in files:
        sidecar = (tmp_path / (name.lstrip("/") + ".sha256")).read_text().split()[0]
        assert sidecar == hashlib.sha256(files[name]).hexdigest()


def test_telemetry_samples_feed_the_power_model(server_factory, tmp_path):
    files = payloads(sizes=[200_000] * 10)
    srv = server_factory(files, throttle=2e6)
    sampler = UtilizationSampler(SyntheticMetricsProvider(RawMetrics(cpu=0.5, mem=0.1, disk=0.0, nic=0.2)))
    model = PowerModel("cpu-only", 20.0, 40.0)
    groups = group_files(entries(files), PROFILE)
    with HttpTransport(tmp_path, base_url=srv.base_url, sampler=sampler, sample_period=0.05) as t:
        out = run_max_throughput(groups, PROFILE, 2, t, power_model=model, window_secs=0.2)
        samples = t.samples
    assert len(samples) >= 3
    # constant 40 W over the sampled span
    span = samples[-1].timestamp - samples[0].timestamp
    assert out.energy == pytest.approx(40.0 * span, rel=0.05)
    assert sum(n for _, n in t.progress) == out.bytes_total


def test_progress_events_are_recorded(server_factory, tmp_path):
    files = payloads()
    srv = server_factory(files)
    groups = group_files(entries(files), PROFILE)
    with HttpTransport(tmp_path, base_url=srv.base_url) as t:
        t.start(groups, {c: p.with_concurrency(2) for c, p in plan_max_throughput(groups, PROFILE, 6).params.items()})
        events = []
        while not t.done:
            rep = t.run(0.5)
            events.extend(rep.events)
    kinds = [e.kind for e in events]
    assert kinds.count(EventKind.FILE_COMPLETE) == len(files)
    assert sum(e.nbytes for e in events if e.kind is EventKind.BYTES_PROGRESS) == sum(map(len, files.values()))
