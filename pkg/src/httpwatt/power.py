"""Linear end-system power models and energy integration.

Two model kinds are supported. The fine-grained model regresses full-system
power on CPU, memory, disk and NIC utilization; the CPU-only model uses the
CPU column alone, for hosts where nothing else is observable. Both are fitted
once per host from a calibration run (load levels vs. metered watts) and then
predict power from OS metrics alone.

``LinearPowerModel`` is a scikit-learn regressor, so calibration composes with
pipelines, cross-validation and ``get_params``/``set_params``. The frozen
``PowerModel`` record is what the rest of the package passes around.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import (
    CalibrationError,
    DegenerateDesign,
    OutOfRangeSample,
    SchemaMismatch,
    TooFewSamples,
    UnderDetermined,
    UnsortedTimeline,
)

COMPONENTS = ("cpu", "mem", "disk", "nic")
CALIBRATION_COLUMNS = ("timestamp", "cpu", "mem", "disk", "nic", "power_watts")


class ModelKind(str, Enum):
    FINE_GRAINED = "fine-grained"
    CPU_ONLY = "cpu-only"

    @classmethod
    def parse(cls, value: "ModelKind | str") -> "ModelKind":
        if isinstance(value, cls):
            return value
        norm = str(value).strip().lower().replace("_", "-")
        aliases = {"finegrained": "fine-grained", "fine": "fine-grained", "cpuonly": "cpu-only", "cpu": "cpu-only"}
        return cls(aliases.get(norm, norm))

    @property
    def n_regressors(self) -> int:
        return 4 if self is ModelKind.FINE_GRAINED else 1


@dataclass(frozen=True)
class UtilizationSample:
    """OS metrics at one instant. Disk and NIC are fractions of a calibrated max throughput."""

    timestamp: float
    cpu: float
    mem: float = 0.0
    disk: float = 0.0
    nic: float = 0.0
    clamped: bool = False  # a counter went backwards and a delta was clamped to 0

    def as_vector(self) -> np.ndarray:
        return np.array([self.cpu, self.mem, self.disk, self.nic], dtype=float)

    def check_range(self) -> None:
        if self.timestamp < 0:
            raise OutOfRangeSample(f"negative timestamp {self.timestamp}")
        for name in COMPONENTS:
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise OutOfRangeSample(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class PowerModel:
    kind: ModelKind
    intercept: float
    coeff_cpu: float
    coeff_mem: float = 0.0
    coeff_disk: float = 0.0
    coeff_nic: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        if self.intercept < 0:
            raise ValueError(f"intercept must be >= 0, got {self.intercept}")
        if self.kind is ModelKind.CPU_ONLY and any((self.coeff_mem, self.coeff_disk, self.coeff_nic)):
            raise ValueError("cpu-only models carry a single slope (coeff_cpu)")

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.coeff_cpu, self.coeff_mem, self.coeff_disk, self.coeff_nic])

    def predict(self, sample: UtilizationSample) -> float:
        return predict_power(self, sample)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PowerModel":
        missing = {"kind", "intercept", "coeff_cpu", "coeff_mem", "coeff_disk", "coeff_nic"} - set(d)
        if missing:
            raise ValueError(f"power model document lacks {sorted(missing)}")
        return cls(
            kind=ModelKind.parse(d["kind"]),
            intercept=float(d["intercept"]),
            coeff_cpu=float(d["coeff_cpu"]),
            coeff_mem=float(d["coeff_mem"]),
            coeff_disk=float(d["coeff_disk"]),
            coeff_nic=float(d["coeff_nic"]),
        )


@dataclass
class CalibrationSet:
    rows: list[tuple[UtilizationSample, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def X(self) -> np.ndarray:
        return np.array([s.as_vector() for s, _ in self.rows], dtype=float).reshape(-1, 4)

    @property
    def y(self) -> np.ndarray:
        return np.array([p for _, p in self.rows], dtype=float)

    @classmethod
    def from_arrays(cls, X, y, timestamps=None) -> "CalibrationSet":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] < 4:
            X = np.hstack([X, np.zeros((X.shape[0], 4 - X.shape[1]))])
        ts = range(len(X)) if timestamps is None else timestamps
        rows = [
            (UtilizationSample(float(t), *map(float, x[:4])), float(p))
            for t, x, p in zip(ts, X, np.asarray(y, dtype=float))
        ]
        return cls(rows)


@dataclass(frozen=True)
class EnergyReport:
    total_energy: float
    avg_power: float
    duration: float
    samples: list[tuple[float, float]]


class LinearPowerModel(RegressorMixin, BaseEstimator):
    """Ordinary least squares power regression.

    ``X`` holds utilization columns in the order cpu, mem, disk, nic. A
    single-column ``X`` is accepted for the cpu-only kind. Predictions are
    floored at 0 W; fitted coefficients are not constrained.
    """

    def __init__(self, kind: str = "fine-grained"):
        self.kind = kind

    def _design(self, X: np.ndarray) -> np.ndarray:
        kind = ModelKind.parse(self.kind)
        if X.shape[1] == 1 and kind is ModelKind.CPU_ONLY:
            return X
        if X.shape[1] != 4:
            raise ValueError(f"expected 4 utilization columns (cpu, mem, disk, nic), got {X.shape[1]}")
        return X[:, :1] if kind is ModelKind.CPU_ONLY else X

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        kind = ModelKind.parse(self.kind)
        Z = self._design(X)
        n, k = Z.shape
        if n < k + 1 + 1:
            raise UnderDetermined(f"{kind.value} model needs at least {k + 2} rows, got {n}")
        names = COMPONENTS[:k]
        flat = [nm for nm, col in zip(names, Z.T) if np.ptp(col) == 0.0]
        if flat:
            raise DegenerateDesign(f"zero-variance regressor(s): {', '.join(flat)}")
        A = np.hstack([np.ones((n, 1)), Z])
        # lstsq returns the minimum-norm solution when columns are collinear
        beta, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
        coef = np.zeros(4)
        coef[:k] = beta[1:]
        self.intercept_ = float(beta[0])
        self.coef_ = coef
        self.rank_ = int(rank)
        self.n_features_in_ = X.shape[1]
        resid = y - A @ beta
        self.rmse_ = float(np.sqrt(np.mean(resid**2)))
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        Z = self._design(X)
        out = self.intercept_ + Z @ self.coef_[: Z.shape[1]]
        return np.maximum(out, 0.0)

    def to_power_model(self) -> PowerModel:
        check_is_fitted(self, "coef_")
        kind = ModelKind.parse(self.kind)
        if self.intercept_ < 0:
            raise CalibrationError(
                f"fitted intercept {self.intercept_:.6g} W is negative; calibration data does not span idle load"
            )
        c = self.coef_
        if kind is ModelKind.CPU_ONLY:
            return PowerModel(kind, self.intercept_, float(c[0]))
        return PowerModel(kind, self.intercept_, *map(float, c))


def fit_model(calib: CalibrationSet, kind: ModelKind | str = ModelKind.FINE_GRAINED) -> PowerModel:
    if len(calib) == 0:
        raise UnderDetermined("empty calibration set")
    bad = [i for i, (_, p) in enumerate(calib.rows) if not p > 0]
    if bad:
        raise CalibrationError(f"measured power must be > 0 (rows {bad[:5]})")
    est = LinearPowerModel(kind=ModelKind.parse(kind).value).fit(calib.X, calib.y)
    return est.to_power_model()


def _raw_power(model: PowerModel, s: UtilizationSample) -> float:
    return (
        model.intercept
        + model.coeff_cpu * s.cpu
        + model.coeff_mem * s.mem
        + model.coeff_disk * s.disk
        + model.coeff_nic * s.nic
    )


def predict_power(model: PowerModel, s: UtilizationSample) -> float:
    s.check_range()
    return max(0.0, _raw_power(model, s))


def integrate_energy(model: PowerModel, timeline: Sequence[UtilizationSample]) -> EnergyReport:
    """Trapezoidal integral of predicted power over the sampled timeline."""
    if len(timeline) < 2:
        raise TooFewSamples(f"need at least 2 samples, got {len(timeline)}")
    for a, b in zip(timeline, timeline[1:]):
        if b.timestamp < a.timestamp:
            raise UnsortedTimeline(f"timestamp {b.timestamp} follows {a.timestamp}")
    watts = [(s.timestamp, predict_power(model, s)) for s in timeline]
    total = 0.0
    for (t0, w0), (t1, w1) in zip(watts, watts[1:]):
        total += 0.5 * (w0 + w1) * (t1 - t0)
    duration = timeline[-1].timestamp - timeline[0].timestamp
    avg = total / duration if duration > 0 else sum(w for _, w in watts) / len(watts)
    return EnergyReport(total_energy=total, avg_power=avg, duration=duration, samples=watts)


# -- file formats -----------------------------------------------------------------


def read_calibration_csv(path: str | Path) -> CalibrationSet:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        for col in CALIBRATION_COLUMNS:
            if col not in header:
                raise SchemaMismatch(path, f"missing column {col!r}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            rec = {k.strip(): v for k, v in rec.items() if k is not None}
            try:
                vals = {c: float(rec[c]) for c in CALIBRATION_COLUMNS}
            except (TypeError, ValueError):
                raise SchemaMismatch(path, f"row {lineno}: non-numeric value") from None
            if not vals["power_watts"] > 0:
                raise SchemaMismatch(path, f"row {lineno}: power_watts must be > 0")
            sample = UtilizationSample(vals["timestamp"], vals["cpu"], vals["mem"], vals["disk"], vals["nic"])
            try:
                sample.check_range()
            except OutOfRangeSample as exc:
                raise SchemaMismatch(path, f"row {lineno}: {exc}") from None
            rows.append((sample, vals["power_watts"]))
    return CalibrationSet(rows)


def write_calibration_csv(calib: CalibrationSet, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CALIBRATION_COLUMNS)
        for s, p in calib.rows:
            w.writerow([repr(s.timestamp), repr(s.cpu), repr(s.mem), repr(s.disk), repr(s.nic), repr(p)])


def save_model(model: PowerModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def load_model(path: str | Path) -> PowerModel:
    return PowerModel.from_dict(json.loads(Path(path).read_text()))


def timeline_energy(model: PowerModel | None, timeline: Iterable[UtilizationSample]) -> float | None:
    """Energy over a timeline, or None when there is no model or too little data."""
    timeline = list(timeline)
    if model is None or len(timeline) < 2:
        return None
    return integrate_energy(model, timeline).total_energy
