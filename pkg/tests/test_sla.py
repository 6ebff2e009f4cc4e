import json
import math

import pytest

from httpwatt.exceptions import EmptyDataset, NoActiveGroups
from httpwatt.planner import FileEntry, SizeClass, SubGroup, group_files
from httpwatt.simulator import DEFAULT_PROFILE, SimProfile, SimulatedTransport, reference_dataset
from httpwatt.sla import (
    SlaMode,
    SlaRequest,
    TransferOutcome,
    activate_deferred,
    execute_plan,
    plan_max_throughput,
    plan_min_energy,
    priority_allocation,
    probe_schedule,
    redistribute_on_completion,
    run_energy_efficiency,
    run_fixed_concurrency,
    run_flexible_throughput,
    run_max_throughput,
    run_sla,
)
from httpwatt.transport.base import GroupStats, Transport, WindowReport

S, M, L = SizeClass.SMALL, SizeClass.MEDIUM, SizeClass.LARGE
NET = DEFAULT_PROFILE.network_profile()  # BDP 7.5 MB, 4 MB buffer


def mixed_groups(n_small=40, n_medium=10, n_large=2):
    files = (
        [FileEntry(f"/s{i}", 100_000) for i in range(n_small)]
        + [FileEntry(f"/m{i}", 2_000_000) for i in range(n_medium)]
        + [FileEntry(f"/l{i}", 30_000_000) for i in range(n_large)]
    )
    return group_files(files, NET)


# -- requests ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        dict(mode="min-energy"),
        dict(mode="max-throughput", channel_count=0),
        dict(mode="energy-efficiency"),
        dict(mode="flexible", max_channels=4, target_fraction=0.5),
        dict(mode="flexible", max_channels=4, target_fraction=1.5, reference_throughput=1e9),
    ],
)
def test_request_validation(kw):
    with pytest.raises(ValueError):
        SlaRequest(**kw)


def test_request_target():
    r = SlaRequest("flexible", max_channels=8, target_fraction=0.5, reference_throughput=1e9)
    assert r.mode is SlaMode.FLEXIBLE
    assert r.target_throughput == 5e8
    assert r.channel_bound == 8


# -- static plans ---------------------------------------------------------------------------


def test_min_energy_defers_groups_without_channels():
    plan = plan_min_energy(mixed_groups(), NET, 2)
    assert plan.allocation() == {S: 2, M: 0, L: 0}
    after = activate_deferred(plan, S, NET)
    # Medium: min(ceil(7.5 / 2) = 4, ceil(3 / 2) = 2, 2) takes both freed channels
    assert after.allocation() == {S: 0, M: 2, L: 0}
    last = activate_deferred(after, M, NET)
    assert last.allocation() == {S: 0, M: 0, L: 1}
    assert last.finished == {S, M}


def test_min_energy_releases_channels_nobody_waits_for():
    plan = plan_min_energy(mixed_groups(), NET, 8)
    assert plan.allocation() == {S: 5, M: 2, L: 1}
    after = activate_deferred(plan, S, NET)
    assert after.allocation() == {S: 0, M: 2, L: 1}
    with pytest.raises(NoActiveGroups):
        activate_deferred(activate_deferred(after, M, NET), L, NET)


def test_max_throughput_rotation_and_redistribution():
    plan = plan_max_throughput(mixed_groups(), NET, 7)
    assert [plan.ledger[i] for i in range(7)] == [L, M, S, L, M, S, L]
    after = redistribute_on_completion(plan, S)
    assert after.allocation() == {S: 0, M: 3, L: 4}
    only_l = redistribute_on_completion(after, M)
    assert only_l.allocation() == {S: 0, M: 0, L: 7}
    with pytest.raises(NoActiveGroups):
        redistribute_on_completion(only_l, L)


def test_plan_overrides_keep_the_ledger():
    plan = plan_max_throughput(mixed_groups(), NET, 5)
    forced = plan.with_overrides(pipelining=3, parallelism=2)
    assert forced.allocation() == plan.allocation()
    assert {(p.pipelining, p.parallelism) for p in forced.params.values()} == {(3, 2)}


def test_plans_need_files_and_channels():
    empty = {c: SubGroup(c) for c in (S, M, L)}
    with pytest.raises(EmptyDataset):
        plan_min_energy(empty, NET, 4)
    with pytest.raises(ValueError):
        plan_max_throughput(mixed_groups(), NET, 0)


def test_probe_schedule():
    assert probe_schedule(1) == [1]
    assert probe_schedule(3) == [1, 3]
    assert probe_schedule(8) == [1, 4, 8]
    assert probe_schedule(10) == [1, 4, 8, 10]
    with pytest.raises(ValueError):
        probe_schedule(0)


def test_priority_allocation_gives_leftover_to_smallest_active():
    groups = mixed_groups()
    assert priority_allocation(groups, [S, M, L], 8, NET) == {S: 5, M: 2, L: 1}
    # Medium: min(4, ceil(11 / 2) = 6, 10) = 4, Large: min(1, ...) = 1, leftover 5 back to Medium
    assert priority_allocation(groups, [M, L], 10, NET) == {S: 0, M: 9, L: 1}
    out = priority_allocation(groups, [L], 3, NET)
    assert out == {S: 0, M: 0, L: 3}


# -- runs on the simulator ------------------------------------------------------------------------


def test_static_runs_deliver_everything():
    groups = mixed_groups()
    total = sum(g.total_bytes for g in groups.values())
    for run in (run_max_throughput, lambda *a: execute_plan(plan_min_energy(a[0], a[1], a[2]), a[3], a[1])):
        t = SimulatedTransport()
        out = run(groups, NET, 6, t)
        assert out.bytes_total == total
        assert t.max_open_channels <= 6
        assert out.energy == pytest.approx(t.energy)
        assert not out.flags


def test_min_energy_history_has_one_entry_per_subgroup():
    out = execute_plan(plan_min_energy(mixed_groups(), NET, 2), SimulatedTransport(), NET)
    assert sorted(h.subgroup.value for h in out.history) == ["large", "medium", "small"]


def test_max_throughput_history_records_redistribution():
    out = run_max_throughput(mixed_groups(), NET, 6, SimulatedTransport())
    firsts = out.history[:3]
    assert {h.subgroup for h in firsts} == {S, M, L} and all(h.concurrency == 2 for h in firsts)
    assert len(out.history) > 3


class ProportionalTransport(Transport):
    """Throughput and power both scale with concurrency, so every level is equally efficient."""

    def __init__(self, total_bytes=10**9, meter=True):
        self.remaining = total_bytes
        self.total = total_bytes
        self.cc = 0
        self.t = 0.0
        self.meter = meter
        self.started = False

    def start(self, groups, params):
        self.started = True

    def configure(self, params):
        self.cc = sum(p.concurrency for p in params.values())

    def run(self, duration=None):
        rate = 1e6 * self.cc
        dt = min(duration if duration is not None else math.inf, self.remaining / rate)
        moved = rate * dt
        self.remaining -= moved
        self.t += dt
        return WindowReport(self.t - dt, self.t, moved, energy=(2.0 * self.cc * dt if self.meter else None), done=self.done)

    @property
    def now(self):
        return self.t

    @property
    def done(self):
        return self.started and self.remaining <= 0

    def pending(self, cls):
        return 1 if cls is S and not self.done else 0

    def group_stats(self):
        return {S: GroupStats(1, self.total, int(self.done), self.total - int(self.remaining))}


def test_efficiency_ties_go_to_lowest_concurrency():
    groups = {S: SubGroup(S, (FileEntry("/x", 10**9),)), M: SubGroup(M), L: SubGroup(L)}
    out = run_energy_efficiency(groups, NET, 12, ProportionalTransport(), window_secs=1.0)
    assert [s.concurrency for s in out.efficiency_samples] == [1, 4, 8, 12]
    assert len({round(s.ratio, 9) for s in out.efficiency_samples}) == 1
    assert out.chosen_concurrency == 1


def test_efficiency_needs_an_energy_source():
    groups = {S: SubGroup(S, (FileEntry("/x", 10**9),)), M: SubGroup(M), L: SubGroup(L)}
    with pytest.raises(ValueError, match="power model"):
        run_energy_efficiency(groups, NET, 4, ProportionalTransport(meter=False), window_secs=1.0)


def test_efficiency_picks_best_probe_and_flags_short_datasets():
    groups = group_files(reference_dataset("small", 1_000_000_000), NET)
    out = run_energy_efficiency(groups, NET, 16, SimulatedTransport())
    best = max(out.efficiency_samples, key=lambda s: (s.ratio, -s.concurrency))
    assert out.chosen_concurrency == best.concurrency
    assert [s.concurrency for s in out.efficiency_samples] == probe_schedule(16)[: len(out.efficiency_samples)]
    tiny = group_files([FileEntry(f"/t{i}", 50_000) for i in range(20)], NET)
    short = run_energy_efficiency(tiny, NET, 16, SimulatedTransport())
    assert TransferOutcome.SEARCH_EXHAUSTED in short.flags


def test_efficiency_with_a_power_model_matches_the_meter():
    groups = group_files(reference_dataset("medium", 1_000_000_000), NET)
    metered = run_energy_efficiency(groups, NET, 16, SimulatedTransport())
    modelled = run_energy_efficiency(groups, NET, 16, SimulatedTransport(), power_model=DEFAULT_PROFILE.power_model())
    assert modelled.chosen_concurrency == metered.chosen_concurrency
    assert modelled.energy == pytest.approx(metered.energy, rel=0.05)


def test_flexible_jumps_then_steps_and_never_decreases():
    sp = SimProfile(per_request_overhead=0.01)
    net = sp.network_profile()
    groups = group_files(reference_dataset("small", 2_000_000_000), net)
    ref = run_max_throughput(groups, net, 32, SimulatedTransport(sp)).achieved_throughput
    target = 0.9 * ref
    out = run_flexible_throughput(groups, net, target, 32, SimulatedTransport(sp))
    levels = [cc for t, cc in out.concurrency_trace() if cc > 0]
    assert levels[0] == 1
    assert levels == sorted(levels)
    first = out.windows[0]
    assert levels[1] == math.ceil(target / first.throughput)
    assert all(b - a == 1 for a, b in zip(levels[1:], levels[2:]))


def test_flexible_flags_unreachable_targets():
    groups = group_files(reference_dataset("small", 2_000_000_000), NET)
    out = run_flexible_throughput(groups, NET, 10e9, 3, SimulatedTransport())
    assert out.target_unreachable and out.chosen_concurrency == 3


def test_fixed_concurrency_and_dispatch():
    groups = mixed_groups()
    fixed = run_fixed_concurrency(groups, NET, 3, SimulatedTransport())
    assert fixed.chosen_concurrency == 3
    req = SlaRequest("max-throughput", channel_count=4)
    assert run_sla(req, groups, NET, SimulatedTransport()).mode is SlaMode.MAX_THROUGHPUT


def test_outcome_serialization(tmp_path):
    out = run_max_throughput(mixed_groups(), NET, 4, SimulatedTransport())
    doc = json.loads(json.dumps(out.to_dict()))
    assert doc["mode"] == "max-throughput" and doc["channels"] == 4
    assert doc["ratio_bits_per_j"] == pytest.approx(out.ratio)
    out.write_history(tmp_path / "h.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert len(lines) == len(out.history)
    assert set(lines[0]) == {"timestamp", "subgroup", "pp", "p", "cc", "window_throughput", "window_joules"}
