import pytest

from httpwatt.exceptions import MetricsUnavailable, SchemaMismatch
from httpwatt.power import UtilizationSample
from httpwatt.telemetry import (
    RawMetrics,
    Sampler,
    SyntheticMetricsProvider,
    UtilizationSampler,
    read_telemetry_csv,
    window_throughput,
    write_telemetry_csv,
)


class Clock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def test_counters_become_rates():
    clock = Clock()
    readings = [
        RawMetrics(cpu=0.2, mem=0.5, disk_bytes=0, nic_bytes=0),
        RawMetrics(cpu=0.4, mem=0.5, disk_bytes=250, nic_bytes=100),
        RawMetrics(cpu=1.7, mem=0.5, disk_bytes=10_000, nic_bytes=50),  # cpu clamped, nic counter reset
    ]
    s = UtilizationSampler(SyntheticMetricsProvider(readings), disk_max=500, nic_max=100, clock=clock)
    first = s.sample()
    assert (first.disk, first.nic, first.clamped) == (0.0, 0.0, False)
    clock.t = 1.0
    second = s.sample()
    assert second.disk == pytest.approx(0.5) and second.nic == pytest.approx(1.0)
    clock.t = 2.0
    third = s.sample()
    assert third.cpu == 1.0 and third.disk == 1.0 and third.nic == 0.0 and third.clamped
    assert not s.degraded


def test_missing_metrics_degrade_to_cpu_only():
    s = UtilizationSampler(SyntheticMetricsProvider(RawMetrics(cpu=0.3)))
    out = s.sample(timestamp=1.0)
    assert s.degraded and (out.cpu, out.mem, out.disk, out.nic) == (0.3, 0.0, 0.0, 0.0)


def test_no_cpu_is_fatal():
    s = UtilizationSampler(SyntheticMetricsProvider(RawMetrics(cpu=None)))
    with pytest.raises(MetricsUnavailable):
        s.sample()


def test_timestamps_stay_monotone():
    s = UtilizationSampler(SyntheticMetricsProvider(RawMetrics(cpu=0.1, mem=0.1, disk=0.0, nic=0.0)))
    assert s.sample(timestamp=5.0).timestamp == 5.0
    assert s.sample(timestamp=4.0).timestamp == 5.0


def test_background_sampler_stops_when_metrics_vanish():
    readings = [RawMetrics(cpu=0.1, mem=0.1, disk=0.0, nic=0.0)] * 2 + [RawMetrics(cpu=None)]
    bg = Sampler(UtilizationSampler(SyntheticMetricsProvider(readings)), period=0.001)
    bg.start()
    bg.join(timeout=5)
    assert bg.failed and len(bg.snapshot()) == 2
    assert bg.sample_now() is None


def test_window_boundaries():
    events = [(0.0, 10), (4.999, 5), (5.0, 7), (12.0, 1)]
    wins = window_throughput(events, 5.0)
    assert [(w.start, w.bytes_moved) for w in wins] == [(0.0, 15), (5.0, 7), (10.0, 1)]
    assert wins[0].throughput == pytest.approx(15 * 8 / 5.0)
    # trailing empty windows up to ``end``, but none when ``end`` sits on a boundary
    assert len(window_throughput(events, 5.0, end=20.0)) == 4
    assert len(window_throughput(events, 5.0, end=21.0)) == 5
    assert len(window_throughput([], 1.0)) == 1
    with pytest.raises(ValueError):
        window_throughput([(-1.0, 1)], 1.0)
    with pytest.raises(ValueError):
        window_throughput(events, 0)


def test_windows_collect_samples():
    samples = [UtilizationSample(t, 0.1) for t in (0.5, 1.5, 2.5, 9.0)]
    wins = window_throughput([(2.9, 1)], 1.0, samples=samples)
    assert [len(w.samples) for w in wins] == [1, 1, 1]


def test_telemetry_csv_round_trip(tmp_path):
    samples = [UtilizationSample(float(t), 0.1 * t, 0.2, 0.0, 0.05) for t in range(4)]
    progress = [(0.5, 100), (1.0, 50), (2.5, 25), (9.0, 1)]
    p = tmp_path / "t.csv"
    write_telemetry_csv(samples, progress, p)
    rows = read_telemetry_csv(p)
    assert [s for s, _ in rows] == samples
    assert [b for _, b in rows] == [0, 150, 0, 25]


@pytest.mark.parametrize(
    "text",
    [
        "timestamp,cpu,mem,disk,nic\n0,0,0,0,0\n",
        "timestamp,cpu,mem,disk,nic,bytes_window\n0,abc,0,0,0,1\n",
        "timestamp,cpu,mem,disk,nic,bytes_window\n0,1.5,0,0,0,1\n",
    ],
)
def test_telemetry_schema_errors(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(SchemaMismatch):
        read_telemetry_csv(p)
    with pytest.raises(SchemaMismatch):
        read_telemetry_csv(tmp_path / "absent.csv")
