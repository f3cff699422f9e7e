"""Open-loop follower simulation along a recorded leader speed profile.

Explicit Euler at the data rate:

    a_k     = clip(model(v_k, vl_k, s_k), accel_min, accel_max)
    v_{k+1} = max(0, v_k + a_k dt)
    s_{k+1} = s_k + (vl_k - v_k) dt

The follower is never re-anchored to the recorded follower columns.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numba
import numpy as np

from .models import IDM, FollowerState, accel_kernel, ModelParams, ModelError, equilibrium_spacing
from .trajectory import TrajectoryDataset, TrajectorySample

IDM_MIN_SPACING = 0.01
SIM_COLUMNS = ("time_s", "sim_speed_mps", "sim_spacing_m", "sim_accel_mps2")


class CollisionError(RuntimeError):
    def __init__(self, time: float, model_tag: str):
        super().__init__(f"{model_tag}: spacing reached zero at t={time:.6g} s")
        self.time = time


@dataclass(frozen=True)
class SimConfig:
    dt: Optional[float] = None
    accel_min: float = -8.0
    accel_max: float = 4.0
    clamp_speed_nonneg: bool = True
    collision_policy: str = "record-and-continue"

    def __post_init__(self):
        if not self.accel_min < self.accel_max:
            raise ValueError(f"accel_min {self.accel_min} must be below accel_max {self.accel_max}")
        if self.dt is not None and not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.collision_policy not in ("record-and-continue", "abort"):
            raise ValueError(f"collision_policy must be record-and-continue or abort, got {self.collision_policy!r}")

    @classmethod
    def unclamped(cls, **kw) -> "SimConfig":
        return cls(accel_min=-math.inf, accel_max=math.inf, clamp_speed_nonneg=False, **kw)


@dataclass(frozen=True)
class SimResult:
    time: np.ndarray
    speed: np.ndarray
    spacing: np.ndarray
    accel: np.ndarray
    collision_events: list = field(default_factory=list)
    model_tag: str = ""

    def __len__(self):
        return len(self.time)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SIM_COLUMNS)
            for row in zip(self.time, self.speed, self.spacing, self.accel):
                w.writerow([repr(float(x)) for x in row])
        return path


@numba.njit(cache=True, nogil=True)
def _integrate(code, p, vl, v_init, s_init, dt, amin, amax, clamp_speed, delay, stop_on_hit):
    n = vl.shape[0]
    v = np.empty(n)
    s = np.empty(n)
    a = np.empty(n)
    hit = np.zeros(n, dtype=np.bool_)
    v[0] = v_init
    s[0] = s_init
    last = n
    for k in range(n):
        if s[k] <= 0.0:
            hit[k] = True
            if stop_on_hit:
                last = k + 1
                break
        j = k - delay if k >= delay else 0
        sj = s[j]
        if code == IDM and sj <= 0.0:
            sj = IDM_MIN_SPACING
        acc = accel_kernel(code, p, v[j], vl[j], sj)
        if acc < amin:
            acc = amin
        elif acc > amax:
            acc = amax
        a[k] = acc
        if k + 1 < n:
            vn = v[k] + acc * dt
            if clamp_speed and vn < 0.0:
                vn = 0.0
            v[k + 1] = vn
            s[k + 1] = s[k] + (vl[k] - v[k]) * dt
    return v, s, a, hit, last


def _kernel_args(model: ModelParams, leader: TrajectoryDataset, init: FollowerState, cfg: SimConfig):
    if len(leader) < 2:
        raise ValueError("leader profile needs at least 2 samples")
    dt = leader.dt if cfg.dt is None else cfg.dt
    return (
        model.code,
        model.kernel_vector(),
        np.ascontiguousarray(leader.leader_speed, dtype=float),
        float(init.v),
        float(init.s),
        float(dt),
        float(cfg.accel_min),
        float(cfg.accel_max),
        bool(cfg.clamp_speed_nonneg),
    )


def simulate(
    model: ModelParams,
    leader: TrajectoryDataset,
    init: Optional[FollowerState] = None,
    cfg: Optional[SimConfig] = None,
) -> SimResult:
    """Integrate the follower along ``leader.leader_speed``.

    ``init`` defaults to the first recorded sample. The first output sample is
    ``init`` itself. Non-positive spacing is recorded as a collision event; with
    ``collision_policy="abort"`` a :class:`CollisionError` is raised instead.
    """
    cfg = cfg or SimConfig()
    init = init or initial_state_from_data(leader)
    abort = cfg.collision_policy == "abort"
    args = _kernel_args(model, leader, init, cfg)
    v, s, a, hit, last = _integrate(*args, 0, abort)
    tag = model.kind
    if abort and hit.any():
        raise CollisionError(float(leader.time[last - 1]), tag)
    return SimResult(
        time=leader.time.copy(),
        speed=v,
        spacing=s,
        accel=a,
        collision_events=[float(t) for t in leader.time[hit]],
        model_tag=tag,
    )


def simulated_spacing(model: ModelParams, leader: TrajectoryDataset, init: FollowerState, cfg: SimConfig) -> np.ndarray:
    """Spacing series only, skipping result assembly (calibration hot path)."""
    args = _kernel_args(model, leader, init, cfg)
    return _integrate(*args, 0, False)[1]


def initial_state_from_data(ds: Union[TrajectoryDataset, Sequence[TrajectorySample]]) -> FollowerState:
    if isinstance(ds, TrajectoryDataset):
        first = ds.sample(0)
    else:
        if len(ds) == 0:
            raise ValueError("cannot take an initial state from an empty dataset")
        first = ds[0]
    return FollowerState(v=first.follower_speed, v_l=first.leader_speed, s=first.spacing)


def synthesize_follower(
    leader: TrajectoryDataset,
    model: ModelParams,
    *,
    init: Optional[FollowerState] = None,
    cfg: Optional[SimConfig] = None,
    reaction_delay_s: float = 0.0,
    spacing_noise: float = 0.0,
    speed_noise: float = 0.0,
    seed: int = 42,
) -> TrajectoryDataset:
    """Fill the follower columns of ``leader`` with a simulated driver.

    The driver reacts to the state ``reaction_delay_s`` in the past, which
    makes the synthetic follower differ from every undelayed model. With zero
    delay and no noise the result equals :func:`simulate` exactly. The default
    start is the model's equilibrium at the initial leader speed, falling back
    to the dataset's first spacing where no equilibrium exists.
    """
    cfg = cfg or SimConfig()
    if init is None:
        v0 = float(leader.leader_speed[0])
        try:
            s0 = equilibrium_spacing(model, v0)
        except ModelError:
            s0 = float(leader.spacing[0])
        init = FollowerState(v=v0, v_l=v0, s=s0)
    delay = int(round(reaction_delay_s / leader.dt))
    if delay < 0:
        raise ValueError(f"reaction delay must be non-negative, got {reaction_delay_s}")
    v, s, a, hit, _ = _integrate(*_kernel_args(model, leader, init, cfg), delay, False)
    if spacing_noise > 0 or speed_noise > 0:
        rng = np.random.default_rng(seed)
        s = s + rng.normal(0.0, spacing_noise, s.shape) if spacing_noise > 0 else s
        if speed_noise > 0:
            v = np.maximum(v + rng.normal(0.0, speed_noise, v.shape), 0.0)
    return leader.replace(follower_speed=v, spacing=s, follower_accel=a)
