"""SLA-driven selection of pipelining, parallelism and concurrency.

Four policies are provided:

* minimum energy: a static plan that favours the Small subgroup and keeps the
  Large subgroup at minimal concurrency;
* maximum throughput: channels dealt round-robin Large, Medium, Small, and
  re-dealt in the same order when a subgroup runs out of files;
* energy efficiency: probes total concurrency 1, 4, 8, ... up to a bound for
  one measurement window each and finishes at the level with the best
  throughput/energy ratio;
* flexible throughput: starts on one channel, jumps to
  ``ceil(target / measured)`` after the first window and then adds one
  channel per window until the target is met.

All of them drive a :class:`~httpwatt.transport.base.Transport`; the
simulator and the HTTP engine are interchangeable.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .exceptions import EmptyDataset, NoActiveGroups
from .planner import (
    DEFAULT_PIPELINING_CAP,
    LARGE_TO_SMALL,
    SMALL_TO_LARGE,
    Groups,
    NetworkProfile,
    SizeClass,
    SubGroup,
    TransferParams,
    apportion,
    min_energy_concurrency,
    optimal_params,
    subgroup_proportions,
)
from .power import PowerModel, UtilizationSample, integrate_energy
from .transport.base import GroupStats, Transport

DEFAULT_WINDOW_SECS = 5.0
_EPS = 1e-9


class SlaMode(str, Enum):
    MIN_ENERGY = "min-energy"
    MAX_THROUGHPUT = "max-throughput"
    ENERGY_EFFICIENCY = "energy-efficiency"
    FLEXIBLE = "flexible"


@dataclass(frozen=True)
class SlaRequest:
    mode: SlaMode
    channel_count: int | None = None
    max_channels: int | None = None
    target_fraction: float | None = None
    reference_throughput: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SlaMode(self.mode))
        self.validate()

    def validate(self) -> None:
        m = self.mode
        if m in (SlaMode.MIN_ENERGY, SlaMode.MAX_THROUGHPUT):
            if not self.channel_count or self.channel_count < 1:
                raise ValueError(f"{m.value} needs channel_count >= 1")
        elif m is SlaMode.ENERGY_EFFICIENCY:
            if not self.max_channels or self.max_channels < 1:
                raise ValueError("energy-efficiency needs max_channels >= 1")
        else:
            if not self.max_channels or self.max_channels < 1:
                raise ValueError("flexible needs max_channels >= 1")
            if self.target_fraction is None or not 0 < self.target_fraction <= 1:
                raise ValueError("flexible needs target_fraction in (0, 1]")
            if not self.reference_throughput or self.reference_throughput <= 0:
                raise ValueError("flexible needs a positive reference_throughput")

    @property
    def channel_bound(self) -> int:
        return self.channel_count if self.mode in (SlaMode.MIN_ENERGY, SlaMode.MAX_THROUGHPUT) else self.max_channels

    @property
    def target_throughput(self) -> float | None:
        if self.target_fraction is None or self.reference_throughput is None:
            return None
        return self.target_fraction * self.reference_throughput


@dataclass(frozen=True)
class TransferPlan:
    mode: SlaMode
    channel_bound: int
    groups: Mapping[SizeClass, SubGroup]
    params: Mapping[SizeClass, TransferParams]
    ledger: Mapping[int, SizeClass]  # channel id -> owning subgroup
    finished: frozenset = frozenset()

    def allocation(self) -> dict[SizeClass, int]:
        out = {c: 0 for c in SMALL_TO_LARGE}
        for c in self.ledger.values():
            out[c] += 1
        return out

    @property
    def granted(self) -> int:
        return len(self.ledger)

    def active(self) -> list[SizeClass]:
        return [c for c in SMALL_TO_LARGE if self.groups.get(c) and c not in self.finished]

    def with_overrides(self, pipelining: int | None = None, parallelism: int | None = None) -> "TransferPlan":
        """Same channel ledger with pipelining and/or parallelism forced for every subgroup."""
        params = {
            c: replace(p, pipelining=pipelining or p.pipelining, parallelism=parallelism or p.parallelism)
            for c, p in self.params.items()
        }
        return _build_plan(self.mode, self.channel_bound, self.groups, params, self.ledger, self.finished)

    def check(self) -> None:
        if self.granted > self.channel_bound:
            raise AssertionError(f"{self.granted} channels granted, bound is {self.channel_bound}")
        alloc = self.allocation()
        for c, p in self.params.items():
            if p.concurrency != alloc[c]:
                raise AssertionError(f"{c.value}: params say cc={p.concurrency}, ledger says {alloc[c]}")
            if p.concurrency > 0 and not self.groups.get(c):
                raise AssertionError(f"{c.value}: channels granted to an empty subgroup")


def _build_plan(mode, bound, groups, base_params, ledger, finished=frozenset()) -> TransferPlan:
    alloc = {c: 0 for c in SMALL_TO_LARGE}
    for c in ledger.values():
        alloc[c] += 1
    params = {c: p.with_concurrency(alloc[c]) for c, p in base_params.items()}
    plan = TransferPlan(mode, bound, dict(groups), params, dict(ledger), frozenset(finished))
    plan.check()
    return plan


def _require_files(groups: Groups) -> None:
    if not any(groups.get(c) for c in SMALL_TO_LARGE):
        raise EmptyDataset("all subgroups are empty")


def plan_min_energy(
    groups: Groups, profile: NetworkProfile, channel_count: int, pp_cap: int = DEFAULT_PIPELINING_CAP
) -> TransferPlan:
    if channel_count < 1:
        raise ValueError("channel_count must be >= 1")
    _require_files(groups)
    base = optimal_params(groups, profile, pp_cap)
    ledger, remaining, next_id = {}, channel_count, 0
    for c in SMALL_TO_LARGE:
        g = groups.get(c)
        if not g:
            continue
        cc = min_energy_concurrency(g, profile, remaining)
        remaining -= cc
        for _ in range(cc):
            ledger[next_id] = c
            next_id += 1
    return _build_plan(SlaMode.MIN_ENERGY, channel_count, groups, base, ledger)


def plan_max_throughput(
    groups: Groups, profile: NetworkProfile, channel_count: int, pp_cap: int = DEFAULT_PIPELINING_CAP
) -> TransferPlan:
    if channel_count < 1:
        raise ValueError("channel_count must be >= 1")
    _require_files(groups)
    base = optimal_params(groups, profile, pp_cap)
    rotation = [c for c in LARGE_TO_SMALL if groups.get(c)]
    ledger = {i: rotation[i % len(rotation)] for i in range(channel_count)}
    return _build_plan(SlaMode.MAX_THROUGHPUT, channel_count, groups, base, ledger)


def redistribute_on_completion(plan: TransferPlan, finished_subgroup: SizeClass) -> TransferPlan:
    """Hand the finished subgroup's channels to the survivors, Large first."""
    finished = plan.finished | {finished_subgroup}
    survivors = [c for c in LARGE_TO_SMALL if plan.groups.get(c) and c not in finished]
    if not survivors:
        raise NoActiveGroups("every subgroup has finished")
    freed = sorted(i for i, c in plan.ledger.items() if c == finished_subgroup)
    ledger = dict(plan.ledger)
    for j, ch in enumerate(freed):
        ledger[ch] = survivors[j % len(survivors)]
    return _build_plan(plan.mode, plan.channel_bound, plan.groups, plan.params, ledger, finished)


def activate_deferred(plan: TransferPlan, finished_subgroup: SizeClass, profile: NetworkProfile) -> TransferPlan:
    """Minimum-energy hand-off: freed channels go only to subgroups still waiting for a grant.

    Channels nobody is waiting for are released rather than recycled.
    """
    finished = plan.finished | {finished_subgroup}
    freed = sorted(i for i, c in plan.ledger.items() if c == finished_subgroup)
    ledger = {i: c for i, c in plan.ledger.items() if c != finished_subgroup}
    alloc = plan.allocation()
    deferred = [c for c in SMALL_TO_LARGE if plan.groups.get(c) and c not in finished and alloc[c] == 0]
    if not deferred and not [c for c in SMALL_TO_LARGE if plan.groups.get(c) and c not in finished]:
        raise NoActiveGroups("every subgroup has finished")
    remaining = len(freed)
    for c in deferred:
        k = min_energy_concurrency(plan.groups[c], profile, remaining)
        for ch in freed[len(freed) - remaining : len(freed) - remaining + k]:
            ledger[ch] = c
        remaining -= k
    return _build_plan(plan.mode, plan.channel_bound, plan.groups, plan.params, ledger, finished)


def probe_schedule(max_channels: int) -> list[int]:
    """Total concurrency levels visited by the efficiency search: 1, 4, 8, ... and the bound."""
    if max_channels < 1:
        raise ValueError("max_channels must be >= 1")
    levels = [1] + list(range(4, max_channels + 1, 4))
    if levels[-1] != max_channels:
        levels.append(max_channels)
    return levels


def priority_allocation(groups: Groups, active: Iterable[SizeClass], total: int, profile: NetworkProfile) -> dict[SizeClass, int]:
    """Small-first split of ``total`` channels; whatever the formula leaves over goes to the smallest class."""
    active = [c for c in SMALL_TO_LARGE if c in set(active) and groups.get(c)]
    out = {c: 0 for c in SMALL_TO_LARGE}
    remaining = total
    for c in active:
        k = min_energy_concurrency(groups[c], profile, remaining)
        out[c] = k
        remaining -= k
    if active and remaining > 0:
        out[active[0]] += remaining
    return out


# -- outcome records ---------------------------------------------------------------


@dataclass(frozen=True)
class EfficiencySample:
    concurrency: int
    window_throughput: float  # bits/s
    window_energy: float  # J
    ratio: float  # bits/J
    window_seconds: float

    @classmethod
    def measure(cls, concurrency: int, bytes_moved: float, seconds: float, energy: float) -> "EfficiencySample":
        thr = bytes_moved * 8.0 / seconds if seconds > 0 else 0.0
        ratio = thr * seconds / energy if energy > 0 else 0.0
        return cls(concurrency, thr, energy, ratio, seconds)


@dataclass(frozen=True)
class HistoryEntry:
    timestamp: float
    subgroup: SizeClass
    pipelining: int
    parallelism: int
    concurrency: int
    window_throughput: float | None = None
    window_joules: float | None = None

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "subgroup": self.subgroup.value,
            "pp": self.pipelining,
            "p": self.parallelism,
            "cc": self.concurrency,
            "window_throughput": self.window_throughput,
            "window_joules": self.window_joules,
        }


@dataclass
class WindowRecord:
    start: float
    end: float
    bytes_moved: float
    energy: float | None
    concurrency: int

    @property
    def throughput(self) -> float:
        d = self.end - self.start
        return self.bytes_moved * 8.0 / d if d > 0 else 0.0


@dataclass
class TransferOutcome:
    mode: SlaMode
    achieved_throughput: float
    energy: float | None
    duration: float
    bytes_total: int
    group_stats: dict[SizeClass, GroupStats]
    history: list[HistoryEntry] = field(default_factory=list)
    windows: list[WindowRecord] = field(default_factory=list)
    efficiency_samples: list[EfficiencySample] = field(default_factory=list)
    chosen_concurrency: int | None = None
    channel_bound: int | None = None
    flags: set[str] = field(default_factory=set)
    failures: list[str] = field(default_factory=list)

    TARGET_UNREACHABLE = "target_unreachable"
    SEARCH_EXHAUSTED = "dataset_exhausted_during_search"
    ENERGY_UNAVAILABLE = "energy_unavailable"

    @property
    def ratio(self) -> float | None:
        if not self.energy:
            return None
        return self.achieved_throughput * self.duration / self.energy

    @property
    def target_unreachable(self) -> bool:
        return self.TARGET_UNREACHABLE in self.flags

    def concurrency_trace(self) -> list[tuple[float, int]]:
        """(time, total concurrency) after every parameter change."""
        cur: dict[SizeClass, int] = {}
        out = []
        for h in self.history:
            cur[h.subgroup] = h.concurrency
            total = sum(cur.values())
            if out and out[-1][0] == h.timestamp:
                out[-1] = (h.timestamp, total)
            else:
                out.append((h.timestamp, total))
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "channels": self.channel_bound,
            "throughput_bps": self.achieved_throughput,
            "energy_j": self.energy,
            "duration_s": self.duration,
            "bytes_total": self.bytes_total,
            "ratio_bits_per_j": self.ratio,
            "chosen_concurrency": self.chosen_concurrency,
            "flags": sorted(self.flags),
            "failures": list(self.failures),
            "groups": {c.value: s.to_dict() for c, s in self.group_stats.items()},
            "efficiency_samples": [s.__dict__ for s in self.efficiency_samples],
            "windows": [
                {"start": w.start, "end": w.end, "bytes": w.bytes_moved, "energy_j": w.energy, "cc": w.concurrency}
                for w in self.windows
            ],
        }

    def write_history(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for h in self.history:
                fh.write(json.dumps(h.to_dict()) + "\n")


# -- control loop --------------------------------------------------------------------


@dataclass
class _WindowStats:
    elapsed: float = 0.0
    bytes_moved: float = 0.0
    energy: float = 0.0
    saturated: bool = False  # files were still queued when the window closed
    samples: list[UtilizationSample] = field(default_factory=list)


class _Controller:
    """Single decision-maker around a transport; owns history and energy accounting."""

    def __init__(
        self,
        transport: Transport,
        groups: Groups,
        base_params: Mapping[SizeClass, TransferParams],
        mode: SlaMode,
        bound: int,
        power_model: PowerModel | None,
        window_secs: float,
    ):
        if window_secs <= 0:
            raise ValueError("window length must be > 0")
        self.t = transport
        self.groups = groups
        self.base = dict(base_params)
        self.mode = mode
        self.bound = bound
        self.power_model = power_model
        self.window_secs = window_secs
        self.history: list[HistoryEntry] = []
        self.windows: list[WindowRecord] = []
        self.samples: list[UtilizationSample] = []
        self.measured_energy = 0.0
        self.energy_measured = True
        self.current = {c: 0 for c in SMALL_TO_LARGE}
        self._last = None
        self.max_granted = 0

    def start(self) -> None:
        self.t.start(self.groups, {c: p.with_concurrency(0) for c, p in self.base.items()})

    def apply(self, alloc: Mapping[SizeClass, int], quiet: Iterable[SizeClass] = ()) -> None:
        alloc = {c: int(alloc.get(c, 0)) for c in SMALL_TO_LARGE}
        total = sum(alloc.values())
        if total > self.bound:
            raise AssertionError(f"allocation {total} exceeds channel bound {self.bound}")
        self.max_granted = max(self.max_granted, total)
        quiet = set(quiet)
        now = self.t.now
        thr = joules = None
        if self._last is not None:
            thr, joules = self._last.throughput, self._last.energy
        for c, p in self.base.items():
            if alloc[c] != self.current[c] and c not in quiet:
                self.history.append(
                    HistoryEntry(now, c, p.pipelining, p.parallelism, alloc[c], thr, joules)
                )
        self.current = alloc
        self.t.configure({c: p.with_concurrency(alloc[c]) for c, p in self.base.items()})

    @property
    def total_concurrency(self) -> int:
        return sum(self.current.values())

    def run_window(self, seconds: float, on_drain: Callable[[tuple], None]) -> _WindowStats:
        st = _WindowStats()
        start = self.t.now
        while st.elapsed < seconds - _EPS and not self.t.done:
            rep = self.t.run(seconds - st.elapsed)
            st.elapsed = self.t.now - start
            st.bytes_moved += rep.bytes_moved
            st.samples.extend(rep.samples)
            if rep.energy is None:
                self.energy_measured = False
            else:
                st.energy += rep.energy
                self.measured_energy += rep.energy
            if rep.drained and not self.t.done:
                on_drain(rep.drained)
            if rep.duration <= 0 and not rep.drained and not self.t.done:
                break  # transport made no progress; avoid spinning
        self.samples.extend(st.samples)
        if self.power_model is not None:
            st.energy = self._model_energy(st.samples, start, self.t.now)
        st.saturated = not self.t.done and any(self.t.pending(c) for c in SMALL_TO_LARGE)
        rec = WindowRecord(start, self.t.now, st.bytes_moved, st.energy if self._has_energy else None, self.total_concurrency)
        self.windows.append(rec)
        self._last = rec
        return st

    @property
    def _has_energy(self) -> bool:
        return self.power_model is not None or self.energy_measured

    def _model_energy(self, samples, t0, t1) -> float:
        pts = sorted((s for s in samples if t0 - _EPS <= s.timestamp <= t1 + _EPS), key=lambda s: s.timestamp)
        if len(pts) < 2:
            return 0.0
        return integrate_energy(self.power_model, pts).total_energy

    def run_to_end(self, on_drain: Callable[[tuple], None]) -> None:
        while not self.t.done:
            before = self.t.now
            self.run_window(self.window_secs, on_drain)
            if self.t.now <= before and not self.t.done:
                raise RuntimeError("transport stalled: no progress and no pending work can start")

    def total_energy(self) -> float | None:
        if self.power_model is not None:
            pts = sorted(self.samples, key=lambda s: s.timestamp)
            return integrate_energy(self.power_model, pts).total_energy if len(pts) >= 2 else None
        return self.measured_energy if self.energy_measured else None

    def outcome(self, **extra) -> TransferOutcome:
        stats = self.t.group_stats()
        total = sum(s.bytes_done for s in stats.values())
        duration = self.t.now
        energy = self.total_energy()
        out = TransferOutcome(
            mode=self.mode,
            achieved_throughput=total * 8.0 / duration if duration > 0 else 0.0,
            energy=energy,
            duration=duration,
            bytes_total=total,
            group_stats=stats,
            history=list(self.history),
            windows=list(self.windows),
            channel_bound=self.bound,
            failures=self.t.failures(),
            **extra,
        )
        if energy is None:
            out.flags.add(TransferOutcome.ENERGY_UNAVAILABLE)
        return out


def _pending_classes(t: Transport, classes: Iterable[SizeClass]) -> list[SizeClass]:
    return [c for c in classes if t.pending(c) > 0]


def execute_plan(
    plan: TransferPlan,
    transport: Transport,
    profile: NetworkProfile,
    power_model: PowerModel | None = None,
    window_secs: float = DEFAULT_WINDOW_SECS,
) -> TransferOutcome:
    """Run a static plan to completion, handing channels on as subgroups drain.

    Maximum-throughput plans re-deal freed channels round-robin; minimum
    energy plans give them only to subgroups that are still waiting for their
    first grant.
    """
    ctl = _Controller(transport, plan.groups, plan.params, plan.mode, plan.channel_bound, power_model, window_secs)
    state = {"plan": plan}
    ctl.start()
    ctl.apply(plan.allocation())

    def on_drain(drained):
        p = state["plan"]
        for c in drained:
            if c in p.finished:
                continue
            try:
                if p.mode is SlaMode.MIN_ENERGY:
                    p = activate_deferred(p, c, profile)
                else:
                    p = redistribute_on_completion(p, c)
            except NoActiveGroups:
                p = _build_plan(p.mode, p.channel_bound, p.groups, p.params, {}, p.finished | {c})
        state["plan"] = p
        # a static plan: releasing a finished subgroup's channels is not a parameter change
        quiet = p.finished if p.mode is SlaMode.MIN_ENERGY else ()
        ctl.apply(p.allocation(), quiet=quiet)

    ctl.run_to_end(on_drain)
    return ctl.outcome()


def run_min_energy(groups, profile, channel_count, transport, power_model=None, window_secs=DEFAULT_WINDOW_SECS, pp_cap=DEFAULT_PIPELINING_CAP):
    plan = plan_min_energy(groups, profile, channel_count, pp_cap)
    return execute_plan(plan, transport, profile, power_model, window_secs)


def run_max_throughput(groups, profile, channel_count, transport, power_model=None, window_secs=DEFAULT_WINDOW_SECS, pp_cap=DEFAULT_PIPELINING_CAP):
    plan = plan_max_throughput(groups, profile, channel_count, pp_cap)
    return execute_plan(plan, transport, profile, power_model, window_secs)


def run_fixed_concurrency(
    groups: Groups,
    profile: NetworkProfile,
    concurrency: int,
    transport: Transport,
    power_model: PowerModel | None = None,
    window_secs: float = DEFAULT_WINDOW_SECS,
    pp_cap: int = DEFAULT_PIPELINING_CAP,
    params: Mapping[SizeClass, TransferParams] | None = None,
) -> TransferOutcome:
    """The efficiency policy without its search: one total concurrency level for the whole run.

    This is the brute-force reference the search is scored against.
    """
    _require_files(groups)
    base = dict(params) if params is not None else optimal_params(groups, profile, pp_cap)
    weights = subgroup_proportions(groups)
    ctl = _Controller(transport, groups, base, SlaMode.ENERGY_EFFICIENCY, concurrency, power_model, window_secs)

    def split():
        live = _pending_classes(transport, base)
        return apportion(concurrency, {c: weights[c] for c in live})

    ctl.start()
    ctl.apply(split())
    ctl.run_to_end(lambda _d: ctl.apply(split()))
    return ctl.outcome(chosen_concurrency=concurrency)


def run_energy_efficiency(
    groups: Groups,
    profile: NetworkProfile,
    max_channels: int,
    transport: Transport,
    power_model: PowerModel | None = None,
    window_secs: float = DEFAULT_WINDOW_SECS,
    pp_cap: int = DEFAULT_PIPELINING_CAP,
) -> TransferOutcome:
    """Search total concurrency in steps of four, then finish at the most efficient level.

    Energy per probe comes from ``power_model`` applied to the window's
    utilization samples, or from the transport's own meter when no model is
    given (the simulator has one).
    """
    _require_files(groups)
    base = optimal_params(groups, profile, pp_cap)
    weights = subgroup_proportions(groups)
    ctl = _Controller(transport, groups, base, SlaMode.ENERGY_EFFICIENCY, max_channels, power_model, window_secs)
    level = {"cc": 1}

    def split():
        live = _pending_classes(transport, base)
        return apportion(level["cc"], {c: weights[c] for c in live})

    def on_drain(_drained):
        ctl.apply(split())

    ctl.start()
    samples: list[EfficiencySample] = []
    probes = probe_schedule(max_channels)
    exhausted = False
    for i, cc in enumerate(probes):
        level["cc"] = cc
        ctl.apply(split())
        w = ctl.run_window(window_secs, on_drain)
        if not ctl._has_energy:
            raise ValueError("energy-efficiency needs a power model or a transport that meters energy")
        if w.elapsed > 0 and w.bytes_moved > 0:
            samples.append(EfficiencySample.measure(cc, w.bytes_moved, w.elapsed, w.energy))
        if transport.done:
            exhausted = i < len(probes) - 1 or w.elapsed < window_secs - _EPS
            break
    if not samples:
        raise EmptyDataset("no data moved during the efficiency search")
    # ties go to the lower concurrency
    best = max(samples, key=lambda s: (s.ratio, -s.concurrency))
    if not transport.done:
        level["cc"] = best.concurrency
        ctl.apply(split())
        ctl.run_to_end(on_drain)
    out = ctl.outcome(efficiency_samples=samples, chosen_concurrency=best.concurrency)
    if exhausted:
        out.flags.add(TransferOutcome.SEARCH_EXHAUSTED)
    return out


def run_flexible_throughput(
    groups: Groups,
    profile: NetworkProfile,
    target_throughput: float,
    max_channels: int,
    transport: Transport,
    power_model: PowerModel | None = None,
    window_secs: float = DEFAULT_WINDOW_SECS,
    pp_cap: int = DEFAULT_PIPELINING_CAP,
) -> TransferOutcome:
    """Meet a throughput floor with as few channels as possible; concurrency never decreases."""
    if not target_throughput > 0:
        raise ValueError("target throughput must be > 0")
    if max_channels < 1:
        raise ValueError("max_channels must be >= 1")
    _require_files(groups)
    base = optimal_params(groups, profile, pp_cap)
    ctl = _Controller(transport, groups, base, SlaMode.FLEXIBLE, max_channels, power_model, window_secs)
    level = {"cc": 1}

    def split():
        live = _pending_classes(transport, base)
        return priority_allocation(groups, live, level["cc"], profile)

    def on_drain(_drained):
        ctl.apply(split())

    ctl.start()
    ctl.apply(split())
    first = True
    unreachable = False
    while not transport.done:
        w = ctl.run_window(window_secs, on_drain)
        if transport.done or not w.saturated:
            continue
        thr = w.bytes_moved * 8.0 / w.elapsed
        if thr < target_throughput:
            cc = level["cc"]
            if cc >= max_channels:
                unreachable = True
            elif first:
                level["cc"] = max_channels if thr <= 0 else min(max_channels, math.ceil(target_throughput / thr))
            else:
                level["cc"] = cc + 1
            if level["cc"] != cc:
                ctl.apply(split())
        first = False
    out = ctl.outcome(chosen_concurrency=level["cc"])
    if unreachable:
        out.flags.add(TransferOutcome.TARGET_UNREACHABLE)
    return out


def run_sla(
    request: SlaRequest,
    groups: Groups,
    profile: NetworkProfile,
    transport: Transport,
    power_model: PowerModel | None = None,
    window_secs: float = DEFAULT_WINDOW_SECS,
    pp_cap: int = DEFAULT_PIPELINING_CAP,
) -> TransferOutcome:
    m = request.mode
    if m is SlaMode.MIN_ENERGY:
        return run_min_energy(groups, profile, request.channel_count, transport, power_model, window_secs, pp_cap)
    if m is SlaMode.MAX_THROUGHPUT:
        return run_max_throughput(groups, profile, request.channel_count, transport, power_model, window_secs, pp_cap)
    if m is SlaMode.ENERGY_EFFICIENCY:
        return run_energy_efficiency(groups, profile, request.max_channels, transport, power_model, window_secs, pp_cap)
    return run_flexible_throughput(
        groups, profile, request.target_throughput, request.max_channels, transport, power_model, window_secs, pp_cap
    )
