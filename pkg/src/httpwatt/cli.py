"""Command-line entry point: ``httpwatt {calibrate,transfer,simulate,report}``.

Settings come from three layers, later ones winning: built-in defaults, a
JSON config (``--config`` or the ``HTTPWATT_CONFIG`` environment variable)
whose keys are the long flag names with dashes turned into underscores, and
the flags themselves.

Exit codes are listed in :data:`EXIT_CODES`.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .exceptions import CalibrationError, EmptyDataset, HttpWattError, SchemaMismatch, Unreachable
from .planner import DEFAULT_PIPELINING_CAP, FileEntry, NetworkProfile, group_files, read_manifest
from .power import ModelKind, fit_model, integrate_energy, load_model, read_calibration_csv, save_model
from .simulator import (
    REFERENCE_SHAPES,
    REFERENCE_VOLUME,
    SimProfile,
    SimulatedTransport,
    reference_dataset,
    throughput_energy_sweep,
    write_sweep_csv,
)
from .sla import DEFAULT_WINDOW_SECS, SlaMode, SlaRequest, TransferOutcome, run_sla
from .telemetry import read_telemetry_csv, write_telemetry_csv

log = logging.getLogger("httpwatt")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NETWORK = 3
EXIT_FILE_FAILED = 4
EXIT_TARGET_UNREACHABLE = 5
EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_ERROR: "unexpected internal error",
    EXIT_USAGE: "usage or input validation error",
    EXIT_NETWORK: "server unreachable",
    EXIT_FILE_FAILED: "one or more files failed after retries",
    EXIT_TARGET_UNREACHABLE: "flexible target not met at the concurrency ceiling",
}

DEFAULT_NETWORK = NetworkProfile(bandwidth=1e9, rtt=0.060, tcp_buffer=4e6)
_ALGO_ALIASES = {
    "mine": "min-energy",
    "min-energy": "min-energy",
    "maxthr": "max-throughput",
    "max-throughput": "max-throughput",
    "ee": "energy-efficiency",
    "energy-efficiency": "energy-efficiency",
    "flex": "flexible",
    "flexible": "flexible",
}


class UsageError(HttpWattError):
    pass


# -- config --------------------------------------------------------------------------------


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def _setting(args: argparse.Namespace, config: dict, name: str, default: Any = None) -> Any:
    v = getattr(args, name, None)
    if v is not None and v is not False:
        return v
    return config.get(name, default if v is None else v)


def _parse_mapping(text: str | dict, what: str) -> dict:
    """A JSON file path, a JSON object, or ``key=value,key=value``."""
    if isinstance(text, dict):
        return dict(text)
    text = text.strip()
    if text.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{what}: invalid JSON ({exc.msg})") from None
    if "=" not in text:
        try:
            return json.loads(Path(text).read_text())
        except OSError as exc:
            raise UsageError(f"{what}: cannot read {text}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{text}: invalid JSON ({exc.msg})") from None
    out = {}
    for part in text.split(","):
        k, sep, v = part.partition("=")
        if not sep:
            raise UsageError(f"{what}: expected key=value, got {part!r}")
        try:
            out[k.strip()] = float(v) if v.strip().lower() != "none" else None
        except ValueError:
            raise UsageError(f"{what}: {k.strip()} is not a number") from None
    return out


def network_profile(spec) -> NetworkProfile:
    if spec is None:
        return DEFAULT_NETWORK
    d = _parse_mapping(spec, "--profile")
    aliases = {"bw": "bandwidth", "buffer": "tcp_buffer", "buf": "tcp_buffer"}
    d = {aliases.get(k, k): v for k, v in d.items()}
    unknown = set(d) - {"bandwidth", "rtt", "tcp_buffer"}
    if unknown:
        raise UsageError(f"--profile: unknown keys {sorted(unknown)}")
    try:
        return NetworkProfile(
            float(d.get("bandwidth", DEFAULT_NETWORK.bandwidth)),
            float(d.get("rtt", DEFAULT_NETWORK.rtt)),
            float(d.get("tcp_buffer", DEFAULT_NETWORK.tcp_buffer)),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--profile: {exc}") from None


def sim_profile(spec) -> SimProfile:
    if spec is None:
        return SimProfile()
    try:
        return SimProfile.from_dict(_parse_mapping(spec, "--profile"))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--profile: {exc}") from None


def sla_request(args, config) -> SlaRequest:
    mode = _setting(args, config, "sla")
    if mode is None:
        raise UsageError("--sla is required")
    mode = _ALGO_ALIASES.get(str(mode).lower(), mode)
    pct = _setting(args, config, "target_pct")
    try:
        return SlaRequest(
            mode=SlaMode(mode),
            channel_count=_setting(args, config, "channels"),
            max_channels=_setting(args, config, "max_channels"),
            target_fraction=None if pct is None else float(pct) / 100.0,
            reference_throughput=_setting(args, config, "reference"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_range(text: str) -> list[int]:
    """``1-32``, ``1..32``, ``4`` or ``1,4,8``."""
    text = str(text).strip()
    try:
        if "," in text:
            levels = [int(x) for x in text.split(",") if x.strip()]
        elif ".." in text or "-" in text:
            a, b = text.replace("..", "-").split("-", 1)
            levels = list(range(int(a), int(b) + 1))
        else:
            levels = [int(text)]
    except ValueError:
        raise UsageError(f"bad concurrency range {text!r}") from None
    if not levels:
        raise UsageError(f"concurrency range {text!r} is empty")
    if min(levels) < 1:
        raise UsageError("concurrency levels must be >= 1")
    return levels


# -- commands ---------------------------------------------------------------------------


def cmd_calibrate(args, config) -> int:
    calib = read_calibration_csv(args.csv)
    kind = ModelKind.parse(_setting(args, config, "kind", "fine-grained"))
    model = fit_model(calib, kind)
    out = _setting(args, config, "out") or "power-model.json"
    save_model(model, out)
    d = model.to_dict()
    print(f"{kind.value} model from {len(calib)} rows -> {out}")
    for k in ("intercept", "coeff_cpu", "coeff_mem", "coeff_disk", "coeff_nic"):
        print(f"  {k:<10} {d[k]:.6g}")
    return EXIT_OK


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_transfer(args, config) -> int:
    from .telemetry import PsutilMetricsProvider, UtilizationSampler
    from .transport.http import HttpTransport, discover_sizes

    req = sla_request(args, config)
    profile = network_profile(_setting(args, config, "profile"))
    manifest = _setting(args, config, "manifest")
    if not manifest:
        raise UsageError("--manifest is required")
    out_root = Path(_setting(args, config, "out") or "httpwatt-out")
    window = float(_setting(args, config, "window_secs", DEFAULT_WINDOW_SECS))
    pp_cap = int(_setting(args, config, "pp_cap", DEFAULT_PIPELINING_CAP))
    base_url = _setting(args, config, "base_url")
    model_path = _setting(args, config, "power_model")
    model = load_model(model_path) if model_path else None
    if req.mode is SlaMode.ENERGY_EFFICIENCY and model is None:
        raise UsageError("energy-efficiency needs --power-model to measure energy")

    files, warnings = discover_sizes(read_manifest(manifest), base_url)
    for w in warnings:
        log.warning(w)
    groups = group_files(files, profile)
    sampler = None
    if model is not None:
        try:
            sampler = UtilizationSampler(PsutilMetricsProvider())
        except HttpWattError as exc:
            log.warning("telemetry unavailable, energy will not be reported: %s", exc)
    transport = HttpTransport(out_root, base_url=base_url, verify=bool(_setting(args, config, "verify", False)), sampler=sampler)
    with transport:
        outcome = run_sla(req, groups, profile, transport, model, window, pp_cap)
    doc = outcome.to_dict()
    doc["warnings"] = warnings + transport.warnings
    doc["network_profile"] = {"bandwidth": profile.bandwidth, "rtt": profile.rtt, "tcp_buffer": profile.tcp_buffer}
    outcome_path = _setting(args, config, "outcome") or out_root / "httpwatt-outcome.json"
    _write_json(outcome_path, doc)
    history_path = _setting(args, config, "history") or out_root / "httpwatt-history.jsonl"
    outcome.write_history(history_path)
    telemetry_path = _setting(args, config, "telemetry")
    if telemetry_path and transport.samples:
        write_telemetry_csv(transport.samples, transport.progress, telemetry_path)
    _print_outcome(outcome)
    if outcome.failures:
        return EXIT_FILE_FAILED
    if outcome.target_unreachable:
        return EXIT_TARGET_UNREACHABLE
    return EXIT_OK


def _print_outcome(o: TransferOutcome) -> None:
    energy = "n/a" if o.energy is None else f"{o.energy:.3f} J"
    print(
        f"{o.mode.value}: {o.bytes_total} bytes in {o.duration:.3f} s, "
        f"{o.achieved_throughput / 1e6:.2f} Mbit/s, energy {energy}"
        + (f", chosen concurrency {o.chosen_concurrency}" if o.chosen_concurrency is not None else "")
        + (f", flags {sorted(o.flags)}" if o.flags else "")
    )


def _sim_dataset(args, config) -> list[FileEntry]:
    manifest = _setting(args, config, "manifest")
    shape = _setting(args, config, "dataset")
    if manifest and shape:
        raise UsageError("give either --manifest or --dataset, not both")
    if manifest:
        files = read_manifest(manifest)
        if any(f.size is None for f in files):
            raise UsageError(f"{manifest}: the simulator needs a size for every file")
        return files
    shape = shape or "small"
    if shape not in REFERENCE_SHAPES and shape != "mixed":
        raise UsageError(f"--dataset must be one of {sorted(REFERENCE_SHAPES) + ['mixed']}")
    volume = int(float(_setting(args, config, "volume", REFERENCE_VOLUME)))
    return reference_dataset(shape, volume, seed=int(_setting(args, config, "seed", 0)))


def cmd_simulate(args, config) -> int:
    sp = sim_profile(_setting(args, config, "profile"))
    seed = int(_setting(args, config, "seed", 0))
    window = float(_setting(args, config, "window_secs", DEFAULT_WINDOW_SECS))
    pp_cap = int(_setting(args, config, "pp_cap", DEFAULT_PIPELINING_CAP))
    sweep = _setting(args, config, "sweep")
    algo = _setting(args, config, "algo") or _setting(args, config, "sla")
    if sweep is None and algo is None:
        raise UsageError("simulate needs --sweep and/or --algo")
    levels = parse_range(sweep) if sweep is not None else None
    dataset = _sim_dataset(args, config)
    out = _setting(args, config, "out")
    meta = (
        f"httpwatt {__version__} simulate; files={len(dataset)} bytes={sum(f.size for f in dataset)} seed={seed}\n"
        f"profile={json.dumps(sp.to_dict(), sort_keys=True)}"
    )
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        if levels is not None:
            pp = _setting(args, config, "pp")
            p = _setting(args, config, "p")
            samples = throughput_energy_sweep(
                dataset, sp, levels, pp=pp, p=p, seed=seed, pp_cap=pp_cap, window_secs=window
            )
            write_sweep_csv(samples, fh, meta)
        if algo is not None:
            if args.algo is not None:
                args.sla = _ALGO_ALIASES.get(args.algo.lower(), args.algo)
            req = sla_request(args, config)
            net = sp.network_profile()
            groups = group_files(dataset, net)
            outcome = run_sla(req, groups, net, SimulatedTransport(sp, seed=seed), None, window, pp_cap)
            if levels is None:
                rows = outcome.efficiency_samples or []
                if rows:
                    write_sweep_csv(rows, fh, meta)
                else:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["concurrency", "throughput_bps", "energy_j", "ratio"])
                    w.writerow([outcome.chosen_concurrency or req.channel_bound, repr(outcome.achieved_throughput), repr(outcome.energy), repr(outcome.ratio)])
            outcome_path = _setting(args, config, "outcome")
            if outcome_path:
                _write_json(outcome_path, outcome.to_dict())
            level = outcome.chosen_concurrency if outcome.chosen_concurrency is not None else req.channel_bound
            print(f"# {req.mode.value} chosen concurrency: {level}", file=sys.stderr if fh is sys.stdout else sys.stdout)
            if outcome.target_unreachable:
                return EXIT_TARGET_UNREACHABLE
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# -- report ------------------------------------------------------------------------------

REPORT_COLUMNS = (
    "source", "mode", "channels", "throughput_bps", "duration_s", "client_joules", "server_joules", "joules", "ratio"
)
_OUTCOME_KEYS = ("mode", "channels", "throughput_bps", "energy_j", "duration_s")


@dataclass
class ReportRow:
    source: str
    mode: str
    channels: int | None
    throughput_bps: float
    duration_s: float
    client_joules: float | None
    server_joules: float | None

    @property
    def joules(self) -> float | None:
        parts = [j for j in (self.client_joules, self.server_joules) if j is not None]
        return sum(parts) if parts else None

    @property
    def ratio(self) -> float | None:
        j = self.joules
        return self.throughput_bps * self.duration_s / j if j else None

    def cells(self) -> list:
        def fmt(v):
            return "" if v is None else repr(v) if isinstance(v, float) else v

        return [fmt(v) for v in (self.source, self.mode, self.channels, self.throughput_bps, self.duration_s,
                                 self.client_joules, self.server_joules, self.joules, self.ratio)]


def read_outcome(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise SchemaMismatch(path, f"cannot read: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(path, f"malformed JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise SchemaMismatch(path, "expected a JSON object")
    missing = [k for k in _OUTCOME_KEYS if k not in doc]
    if missing:
        raise SchemaMismatch(path, f"missing keys {missing}")
    for k in ("throughput_bps", "duration_s"):
        if not isinstance(doc[k], (int, float)):
            raise SchemaMismatch(path, f"{k} must be a number")
    return doc


def _telemetry_joules(path, model_path) -> float:
    if not model_path:
        raise UsageError(f"{path}: telemetry needs a power model to convert to joules")
    samples = [s for s, _ in read_telemetry_csv(path)]
    return integrate_energy(load_model(model_path), samples).total_energy


def build_report(
    outcomes: Sequence[str],
    telemetry: Sequence[str] = (),
    server_telemetry: Sequence[str] = (),
    power_model: str | None = None,
    server_power_model: str | None = None,
) -> list[ReportRow]:
    for name, lst in (("--telemetry", telemetry), ("--server-telemetry", server_telemetry)):
        if lst and len(lst) != len(outcomes):
            raise UsageError(f"{name} must be given once per outcome ({len(outcomes)}), got {len(lst)}")
    rows = []
    for i, path in enumerate(outcomes):
        doc = read_outcome(path)
        client = doc.get("energy_j")
        if telemetry:
            client = _telemetry_joules(telemetry[i], power_model)
        server = _telemetry_joules(server_telemetry[i], server_power_model) if server_telemetry else None
        rows.append(
            ReportRow(
                source=Path(path).name,
                mode=str(doc["mode"]),
                channels=doc.get("channels"),
                throughput_bps=float(doc["throughput_bps"]),
                duration_s=float(doc["duration_s"]),
                client_joules=None if client is None else float(client),
                server_joules=server,
            )
        )
    return rows


def cmd_report(args, config) -> int:
    if not args.inputs:
        raise UsageError("report needs at least one outcome JSON")
    rows = build_report(
        args.inputs,
        args.telemetry or [],
        args.server_telemetry or [],
        _setting(args, config, "power_model"),
        _setting(args, config, "server_power_model"),
    )
    out = _setting(args, config, "out")
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow(r.cells())
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="httpwatt", description="Energy-aware HTTP multi-file transfers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON config (default: $HTTPWATT_CONFIG)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def sla_flags(sp):
        sp.add_argument("--sla", choices=[m.value for m in SlaMode])
        sp.add_argument("--channels", type=int, help="channel count (min-energy, max-throughput)")
        sp.add_argument("--max-channels", type=int, help="concurrency bound (energy-efficiency, flexible)")
        sp.add_argument("--target-pct", type=float, help="flexible target as a percentage of --reference")
        sp.add_argument("--reference", type=float, help="reference throughput in bits/s")
        sp.add_argument("--window-secs", type=float, help=f"measurement window (default {DEFAULT_WINDOW_SECS:g})")
        sp.add_argument("--pp-cap", type=int, help=f"pipelining cap (default {DEFAULT_PIPELINING_CAP})")
        sp.add_argument("--outcome", help="write the outcome JSON here")

    c = sub.add_parser("calibrate", help="fit a power model from a calibration CSV")
    c.add_argument("csv")
    c.add_argument("--kind", choices=[k.value for k in ModelKind])
    c.add_argument("--out", help="model JSON path (default power-model.json)")
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("transfer", help="run a real HTTP transfer")
    sla_flags(t)
    t.add_argument("--manifest", help="file list: '<url> [size_bytes]' per line")
    t.add_argument("--base-url", help="prefix for relative manifest entries")
    t.add_argument("--out", help="output root (default ./httpwatt-out)")
    t.add_argument("--profile", help="network profile: JSON file or bandwidth=..,rtt=..,tcp_buffer=..")
    t.add_argument("--power-model", help="power model JSON; enables energy estimates")
    t.add_argument("--verify", action="store_true", default=None, help="write a .sha256 sidecar per file")
    t.add_argument("--history", help="parameter-history JSONL path")
    t.add_argument("--telemetry", help="write sampled telemetry CSV here")
    t.set_defaults(func=cmd_transfer)

    s = sub.add_parser("simulate", help="simulated sweeps and SLA runs")
    sla_flags(s)
    s.add_argument("--algo", help="alias of --sla (also accepts ee, mine, maxthr, flex)")
    s.add_argument("--sweep", help="brute-force concurrency range, e.g. 1-32")
    s.add_argument("--pp", type=int, help="force pipelining for the sweep")
    s.add_argument("--p", type=int, help="force parallelism for the sweep")
    s.add_argument("--dataset", help="reference dataset shape: small, medium, large or mixed")
    s.add_argument("--volume", type=float, help="reference dataset size in bytes")
    s.add_argument("--manifest", help="sized manifest instead of a reference dataset")
    s.add_argument("--profile", help="simulator profile: JSON file or key=value list")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="merge outcome JSONs into one CSV")
    r.add_argument("inputs", nargs="*")
    r.add_argument("--telemetry", action="append", help="client telemetry CSV, once per input")
    r.add_argument("--server-telemetry", action="append", help="server telemetry CSV, once per input")
    r.add_argument("--power-model", help="client power model for --telemetry")
    r.add_argument("--server-power-model", help="server power model for --server-telemetry")
    r.add_argument("--out", help="CSV path (default stdout)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config or os.environ.get("HTTPWATT_CONFIG"))
        return args.func(args, config)
    except (UsageError, SchemaMismatch, CalibrationError, EmptyDataset) as exc:
        print(f"httpwatt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Unreachable as exc:
        print(f"httpwatt: network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except ValueError as exc:
        print(f"httpwatt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
