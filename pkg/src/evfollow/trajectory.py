"""Trajectory ingestion, validation, slicing and synthetic leader profiles.

Datasets are stored column-wise as read-only numpy arrays in SI units.
mph only exists at the ingestion boundary.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
MPH_TO_MPS = 0.44704
DT_TOLERANCE = 1e-6

CANONICAL_COLUMNS = ("time_s", "leader_speed_mps", "follower_speed_mps", "spacing_m", "gap_setting")
RAW_COLUMNS = (
    "time_s",
    "leader_lat",
    "leader_lon",
    "follower_lat",
    "follower_lon",
    "leader_speed",
    "follower_speed",
    "speed_unit",
    "gap_setting",
)

PathLike = Union[str, Path]


class TrajectoryError(ValueError):
    """Invalid trajectory input (bad file, bad values, bad slicing request)."""


class GapSetting(enum.Enum):
    SHORT = "short"
    MEDIUM = "medium"
    LONG = "long"
    XLONG = "xlong"

    @property
    def code(self) -> int:
        return _GAP_ORDER.index(self)

    @classmethod
    def parse(cls, value: Union[str, "GapSetting"]) -> "GapSetting":
        if isinstance(value, GapSetting):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "").replace(" ", "")
        aliases = {"extralong": "xlong", "xl": "xlong"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise TrajectoryError(
                f"unknown gap setting {value!r}; expected one of short, medium, long, xlong"
            ) from None


_GAP_ORDER = (GapSetting.SHORT, GapSetting.MEDIUM, GapSetting.LONG, GapSetting.XLONG)


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float

    def __post_init__(self):
        lat, lon = self.latitude, self.longitude
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise TrajectoryError(f"non-finite coordinates ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise TrajectoryError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise TrajectoryError(f"longitude {lon} outside [-180, 180]")


@dataclass(frozen=True)
class TrajectorySample:
    time: float
    leader_speed: float
    follower_speed: float
    spacing: float
    follower_accel: Optional[float] = None


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters between two points."""
    for p in (a, b):
        if not (math.isfinite(p.latitude) and math.isfinite(p.longitude)):
            raise TrajectoryError(f"non-finite coordinates in {p}")
    return float(_haversine(a.latitude, a.longitude, b.latitude, b.longitude))


def _haversine(lat1, lon1, lat2, lon2):
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2.0) ** 2
    # rounding can push h a hair above 1 for antipodes
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(h))


def _readonly(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TrajectoryDataset:
    """Uniformly sampled leader/follower record for one gap setting.

    Arrays are copied and frozen on construction, so instances can be
    shared freely between workers.
    """

    time: np.ndarray
    leader_speed: np.ndarray
    follower_speed: np.ndarray
    spacing: np.ndarray
    dt: float
    gap: GapSetting
    label: str = ""
    follower_accel: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("time", "leader_speed", "follower_speed", "spacing"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        if self.follower_accel is not None:
            object.__setattr__(self, "follower_accel", _readonly(self.follower_accel))
        object.__setattr__(self, "gap", GapSetting.parse(self.gap))
        object.__setattr__(self, "dt", float(self.dt))
        validate_dataset(self)

    def __len__(self) -> int:
        return len(self.time)

    @property
    def duration(self) -> float:
        """Covered time span, counting each sample as one dt interval."""
        return len(self) * self.dt

    @property
    def samples(self) -> Iterator[TrajectorySample]:
        acc = self.follower_accel
        for i in range(len(self)):
            yield TrajectorySample(
                float(self.time[i]),
                float(self.leader_speed[i]),
                float(self.follower_speed[i]),
                float(self.spacing[i]),
                None if acc is None else float(acc[i]),
            )

    def sample(self, i: int) -> TrajectorySample:
        acc = self.follower_accel
        return TrajectorySample(
            float(self.time[i]),
            float(self.leader_speed[i]),
            float(self.follower_speed[i]),
            float(self.spacing[i]),
            None if acc is None else float(acc[i]),
        )

    def slice(self, start: int, stop: int, label: Optional[str] = None) -> "TrajectoryDataset":
        acc = None if self.follower_accel is None else self.follower_accel[start:stop]
        return TrajectoryDataset(
            time=self.time[start:stop],
            leader_speed=self.leader_speed[start:stop],
            follower_speed=self.follower_speed[start:stop],
            spacing=self.spacing[start:stop],
            dt=self.dt,
            gap=self.gap,
            label=self.label if label is None else label,
            follower_accel=acc,
        )

    def replace(self, **changes) -> "TrajectoryDataset":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return TrajectoryDataset(**kw)

    @classmethod
    def from_samples(cls, samples, dt: float, gap, label: str = "") -> "TrajectoryDataset":
        samples = list(samples)
        acc = [s.follower_accel for s in samples]
        return cls(
            time=[s.time for s in samples],
            leader_speed=[s.leader_speed for s in samples],
            follower_speed=[s.follower_speed for s in samples],
            spacing=[s.spacing for s in samples],
            dt=dt,
            gap=gap,
            label=label,
            follower_accel=None if any(a is None for a in acc) else acc,
        )


def validate_dataset(ds: TrajectoryDataset) -> None:
    """Raise TrajectoryError unless ``ds`` satisfies every dataset invariant."""
    n = len(ds.time)
    if n < 2:
        raise TrajectoryError(f"dataset needs at least 2 samples, got {n}")
    if not (math.isfinite(ds.dt) and ds.dt > 0):
        raise TrajectoryError(f"dt must be positive and finite, got {ds.dt}")
    cols = [("time", ds.time), ("leader_speed", ds.leader_speed),
            ("follower_speed", ds.follower_speed), ("spacing", ds.spacing)]
    if ds.follower_accel is not None:
        cols.append(("follower_accel", ds.follower_accel))
    for name, col in cols:
        if col.shape != (n,):
            raise TrajectoryError(f"column {name} has shape {col.shape}, expected ({n},)")
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise TrajectoryError(f"non-finite {name} at sample {bad[0]}")
    for name in ("leader_speed", "follower_speed"):
        neg = np.flatnonzero(getattr(ds, name) < 0)
        if neg.size:
            raise TrajectoryError(f"negative {name} at sample {neg[0]}")
    _check_time_axis(ds.time, ds.dt)


def _check_time_axis(time: np.ndarray, dt: float, row_offset: int = 0) -> None:
    steps = np.diff(time)
    bad = np.flatnonzero(steps <= 0)
    if bad.size:
        i = bad[0] + 1
        raise TrajectoryError(f"time not strictly increasing at row {i + row_offset} (t={time[i]})")
    bad = np.flatnonzero(np.abs(steps - dt) > DT_TOLERANCE)
    if bad.size:
        i = bad[0] + 1
        raise TrajectoryError(
            f"inconsistent sampling interval at row {i + row_offset}: "
            f"step {steps[i - 1]:.9g} s, expected {dt:.9g} s"
        )


# --------------------------------------------------------------------------- ingestion


@dataclass
class IngestConfig:
    """Ingestion options.

    ``dt=None`` infers the interval from the median time step. ``gap`` overrides
    the per-row gap column when the file lacks one or mixes labels.
    """

    dt: Optional[float] = None
    gap: Optional[str] = None
    label: Optional[str] = None


def ingest_raw(path: PathLike, config: Optional[IngestConfig] = None) -> TrajectoryDataset:
    """Read a canonical or raw GPS trajectory CSV into a dataset.

    The schema is recognised from the header. Raw GPS files get their
    spacing from the haversine distance between the two vehicles at each
    timestamp and speeds converted from mph where declared.
    """
    config = config or IngestConfig()
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise TrajectoryError(f"{path}: empty file") from None
            rows = [r for r in reader if any(c.strip() for c in r)]
    except OSError as exc:
        raise TrajectoryError(f"{path}: {exc.strerror or exc}") from exc

    if set(CANONICAL_COLUMNS) <= set(header):
        kind, required = "canonical", CANONICAL_COLUMNS
    elif "leader_lat" in header or "follower_lat" in header:
        kind, required = "raw", RAW_COLUMNS
    else:
        kind, required = "canonical", CANONICAL_COLUMNS
    missing = [c for c in required if c not in header]
    if missing:
        raise TrajectoryError(f"{path}: missing column(s) {', '.join(missing)} in header")
    idx = {c: header.index(c) for c in required}

    def cell(row, rownum, col):
        try:
            value = row[idx[col]].strip()
        except IndexError:
            value = ""
        if value == "":
            raise TrajectoryError(f"{path}: row {rownum}: missing value for {col}")
        return value

    def num(row, rownum, col):
        raw = cell(row, rownum, col)
        try:
            value = float(raw)
        except ValueError:
            raise TrajectoryError(f"{path}: row {rownum}: {col}={raw!r} is not a number") from None
        if not math.isfinite(value):
            raise TrajectoryError(f"{path}: row {rownum}: {col} is not finite")
        return value

    if not rows:
        raise TrajectoryError(f"{path}: no data rows")

    time, vl, vf, sp, gaps = [], [], [], [], []
    # header is row 1; first data row is row 2
    for k, row in enumerate(rows, start=2):
        time.append(num(row, k, "time_s"))
        gaps.append(cell(row, k, "gap_setting"))
        if kind == "canonical":
            vl.append(num(row, k, "leader_speed_mps"))
            vf.append(num(row, k, "follower_speed_mps"))
            sp.append(num(row, k, "spacing_m"))
        else:
            unit = cell(row, k, "speed_unit").lower()
            if unit not in ("mps", "mph"):
                raise TrajectoryError(f"{path}: row {k}: speed_unit {unit!r} not in {{mps, mph}}")
            scale = MPH_TO_MPS if unit == "mph" else 1.0
            vl.append(num(row, k, "leader_speed") * scale)
            vf.append(num(row, k, "follower_speed") * scale)
            try:
                a = GeoPoint(num(row, k, "leader_lat"), num(row, k, "leader_lon"))
                b = GeoPoint(num(row, k, "follower_lat"), num(row, k, "follower_lon"))
            except TrajectoryError as exc:
                raise TrajectoryError(f"{path}: row {k}: {exc}") from None
            sp.append(haversine_distance(a, b))
        for col, val in (("leader speed", vl[-1]), ("follower speed", vf[-1])):
            if val < 0:
                raise TrajectoryError(f"{path}: row {k}: negative {col} {val}")

    time_arr = np.asarray(time)
    if len(time_arr) < 2:
        raise TrajectoryError(f"{path}: need at least 2 data rows, got {len(time_arr)}")
    dt = config.dt if config.dt is not None else float(np.median(np.diff(time_arr)))
    if not dt > 0:
        raise TrajectoryError(f"{path}: time not strictly increasing at row 3")
    try:
        _check_time_axis(time_arr, dt, row_offset=2)
    except TrajectoryError as exc:
        raise TrajectoryError(f"{path}: {exc}") from None

    if config.gap is not None:
        gap = GapSetting.parse(config.gap)
    else:
        parsed = {GapSetting.parse(g) for g in gaps}
        if len(parsed) != 1:
            labels = ", ".join(sorted(g.value for g in parsed))
            raise TrajectoryError(f"{path}: mixed gap settings ({labels}); split the file or pass a gap override")
        gap = parsed.pop()

    return TrajectoryDataset(
        time=time_arr,
        leader_speed=vl,
        follower_speed=vf,
        spacing=sp,
        dt=dt,
        gap=gap,
        label=config.label if config.label is not None else path.stem,
    )


def write_canonical(ds: TrajectoryDataset, path: PathLike) -> Path:
    """Write ``ds`` in the canonical CSV schema with round-trip exact floats."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANONICAL_COLUMNS)
        for i in range(len(ds)):
            w.writerow([
                repr(float(ds.time[i])),
                repr(float(ds.leader_speed[i])),
                repr(float(ds.follower_speed[i])),
                repr(float(ds.spacing[i])),
                ds.gap.value,
            ])
    return path


def slice_subsets(ds: TrajectoryDataset, window: float = 200.0) -> list[TrajectoryDataset]:
    """Cut ``ds`` into consecutive non-overlapping windows of ``window`` seconds.

    A trailing remainder shorter than the window is dropped.
    """
    if not (math.isfinite(window) and window > 0):
        raise TrajectoryError(f"window must be positive, got {window}")
    per = int(round(window / ds.dt))
    if abs(per * ds.dt - window) > DT_TOLERANCE * max(per, 1):
        raise TrajectoryError(f"window {window} s is not a whole number of samples at dt={ds.dt} s")
    if per < 2:
        raise TrajectoryError(f"window {window} s holds fewer than 2 samples at dt={ds.dt} s")
    count = len(ds) // per
    if count == 0:
        raise TrajectoryError(
            f"window {window:g} s is longer than the dataset duration {ds.duration:g} s"
        )
    return [
        ds.slice(k * per, (k + 1) * per, label=f"{ds.label}[{k}]")
        for k in range(count)
    ]


# --------------------------------------------------------------------------- synthetic scenarios


@dataclass
class ScenarioSpec:
    """Leader speed profile of repeated speed-fluctuation episodes.

    Each episode holds the free-flow speed, ramps down to the congested speed,
    holds it for ``congested_hold_s`` and ramps back up. After the last episode
    the free-flow speed is held until ``duration_s`` (when given) is filled.
    """

    free_flow_speed: float = 26.8224
    congested_speed: float = 15.6464
    repetitions: int = 1
    free_hold_s: float = 30.0
    congested_hold_s: float = 10.0
    decel_rate: float = 1.0
    accel_rate: float = 0.8
    duration_s: Optional[float] = None
    dt: float = 0.04
    gap: str = "long"
    label: str = "synthetic"
    leader_speed_noise: float = 0.0
    initial_spacing: Optional[float] = None
    follower: Optional[dict] = field(default=None)

    def validate(self) -> None:
        checks = [
            ("free_flow_speed", self.free_flow_speed, lambda x: x >= 0),
            ("congested_speed", self.congested_speed, lambda x: x >= 0),
            ("free_hold_s", self.free_hold_s, lambda x: x >= 0),
            ("congested_hold_s", self.congested_hold_s, lambda x: x >= 0),
            ("decel_rate", self.decel_rate, lambda x: x > 0),
            ("accel_rate", self.accel_rate, lambda x: x > 0),
            ("dt", self.dt, lambda x: x > 0),
            ("leader_speed_noise", self.leader_speed_noise, lambda x: x >= 0),
        ]
        for name, value, ok in checks:
            if not (math.isfinite(value) and ok(value)):
                raise TrajectoryError(f"invalid scenario: {name}={value}")
        if self.repetitions < 0 or int(self.repetitions) != self.repetitions:
            raise TrajectoryError(f"invalid scenario: repetitions={self.repetitions}")
        if self.duration_s is not None and not self.duration_s > 0:
            raise TrajectoryError(f"invalid scenario: duration_s={self.duration_s}")
        if self.initial_spacing is not None and not self.initial_spacing > 0:
            raise TrajectoryError(f"invalid scenario: initial_spacing={self.initial_spacing}")
        GapSetting.parse(self.gap)

    @classmethod
    def from_json(cls, text_or_path) -> "ScenarioSpec":
        p = Path(str(text_or_path))
        text = p.read_text() if p.suffix == ".json" or p.exists() else str(text_or_path)
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise TrajectoryError(f"unknown scenario field(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _ramp(v_from: float, v_to: float, rate: float, dt: float) -> list[float]:
    """Interior points of a linear ramp; the following hold supplies ``v_to``."""
    n = int(math.ceil(abs(v_to - v_from) / (rate * dt)))
    return [v_from + (v_to - v_from) * (k / n) for k in range(1, n)]


def leader_speed_profile(spec: ScenarioSpec) -> np.ndarray:
    """Noise-free leader speeds, one value per step."""
    spec.validate()
    dt = spec.dt
    hold_free = int(round(spec.free_hold_s / dt))
    hold_cong = int(round(spec.congested_hold_s / dt))
    vf, vc = spec.free_flow_speed, spec.congested_speed
    speeds = [vf] * max(hold_free, 1)
    for _ in range(spec.repetitions):
        speeds += _ramp(vf, vc, spec.decel_rate, dt)
        speeds += [vc] * max(hold_cong, 1)
        speeds += _ramp(vc, vf, spec.accel_rate, dt)
        speeds += [vf] * max(hold_free, 1)
    if spec.duration_s is not None:
        n = int(round(spec.duration_s / dt))
        if len(speeds) < n:
            speeds += [vf] * (n - len(speeds))
        speeds = speeds[:n]
    if len(speeds) < 2:
        speeds += [vf] * (2 - len(speeds))
    return np.asarray(speeds, dtype=float)


def synth_leader_profile(spec: ScenarioSpec, seed: int = 42) -> TrajectoryDataset:
    """Build a deterministic leader trajectory from ``spec``.

    Follower columns are placeholders: the follower cruises at the initial
    leader speed with ``initial_spacing`` (default 2 s headway + 5 m), constant.
    Fill them with :func:`evfollow.simulator.synthesize_follower`.
    """
    spec.validate()
    vl = leader_speed_profile(spec)
    if spec.leader_speed_noise > 0:
        rng = np.random.default_rng(seed)
        vl = np.maximum(vl + rng.normal(0.0, spec.leader_speed_noise, vl.shape), 0.0)
    n = len(vl)
    s_init = spec.initial_spacing if spec.initial_spacing is not None else 5.0 + 2.0 * vl[0]
    return TrajectoryDataset(
        time=np.arange(n) * spec.dt,
        leader_speed=vl,
        follower_speed=np.full(n, vl[0]),
        spacing=np.full(n, s_init),
        dt=spec.dt,
        gap=spec.gap,
        label=spec.label,
    )
