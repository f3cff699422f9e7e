"""Run configuration and the end-to-end comparison pipeline.

Seeds derive from the single run seed:

    optimizer multi-starts  seed + 0
    forests                 seed + 100
    synthetic scenarios     seed + 200
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .calibration import Bounds, CalibrationResult, OptimizerConfig, calibrate, default_bounds
from .forest import ForestConfig, build_features, train_and_evaluate
from .models import MODEL_KINDS, make_params, params_class
from .report import ComparisonReport, ForestEntry, build_report, export_plot_data, forest_trace
from .simulator import SimConfig, simulate
from .trajectory import GapSetting, IngestConfig, TrajectoryDataset, ingest_raw

log = logging.getLogger(__name__)

OPTIMIZER_SEED_OFFSET = 0
FOREST_SEED_OFFSET = 100
SYNTH_SEED_OFFSET = 200
OUT_ENV = "EVFOLLOW_OUT"


class ConfigError(ValueError):
    pass


def default_out_dir() -> str:
    return os.environ.get(OUT_ENV, "evfollow_out")


@dataclass
class RunConfig:
    data: dict = field(default_factory=dict)
    models: list = field(default_factory=lambda: list(MODEL_KINDS))
    bounds: dict = field(default_factory=dict)
    x0: dict = field(default_factory=dict)
    window: float = 200.0
    optimizer: dict = field(default_factory=dict)
    forest: dict = field(default_factory=dict)
    forest_split: str = "chronological"
    forest_fraction: float = 0.8
    rf: bool = True
    sim: dict = field(default_factory=dict)
    output_dir: Optional[str] = None
    svg: bool = False
    seed: int = 42

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run-config key(s): {', '.join(sorted(unknown))}")
        cfg = cls(**d)
        if base_dir is not None:
            cfg.data = {g: str(p if Path(p).is_absolute() else base_dir / p) for g, p in cfg.data.items()}
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from exc
        return cls.from_dict(d, base_dir=path.parent)

    def validate(self, check_paths: bool = False) -> None:
        for g in self.data:
            GapSetting.parse(g)
        for m in self.models:
            if m not in MODEL_KINDS:
                raise ConfigError(f"unknown model {m!r}; expected one of {', '.join(MODEL_KINDS)}")
        for m, b in self.bounds.items():
            bb = Bounds.from_json(b)
            if len(bb) != len(params_class(m).names):
                raise ConfigError(f"bounds for {m} need {len(params_class(m).names)} entries")
        if not self.window > 0:
            raise ConfigError(f"window must be positive, got {self.window}")
        for what, build in (("optimizer", self.optimizer_config), ("forest", self.forest_config),
                            ("sim", self.sim_config)):
            try:
                build()
            except TypeError as exc:
                raise ConfigError(f"bad {what} settings: {exc}") from None
        if check_paths:
            for g, p in self.data.items():
                if not Path(p).exists():
                    raise ConfigError(f"data file for gap {g} not found: {p}")

    def bounds_for(self, model: str) -> Bounds:
        return Bounds.from_json(self.bounds[model]) if model in self.bounds else default_bounds(model)

    def x0_for(self, model: str):
        v = self.x0.get(model, "mid")
        return None if v in (None, "mid") else list(v)

    def optimizer_config(self) -> OptimizerConfig:
        d = {"seed": self.seed + OPTIMIZER_SEED_OFFSET, **self.optimizer}
        return OptimizerConfig(**d)

    def forest_config(self) -> ForestConfig:
        d = {"seed": self.seed + FOREST_SEED_OFFSET, **self.forest}
        return ForestConfig(**d)

    def sim_config(self) -> SimConfig:
        return SimConfig(**self.sim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineResult:
    report: ComparisonReport
    calibrations: list
    forests: list
    datasets: dict
    sims: dict


def load_datasets(cfg: RunConfig) -> dict:
    out = {}
    for g, path in cfg.data.items():
        gap = GapSetting.parse(g)
        out[gap.value] = ingest_raw(path, IngestConfig(gap=gap.value))
    return out


def run_pipeline(cfg: RunConfig, datasets: Optional[dict] = None, jobs: int = 1, out_dir=None) -> PipelineResult:
    """Calibrate every model on every gap, train the forests and build the report.

    When ``out_dir`` is given, calibration JSONs, forest model files, the
    report JSON and per-gap plot CSVs are written there.
    """
    if datasets is None:
        cfg.validate(check_paths=True)
        datasets = load_datasets(cfg)
    if not datasets:
        raise ConfigError("run config lists no data files")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    opt = cfg.optimizer_config()
    sim_cfg = cfg.sim_config()
    calibs: list[CalibrationResult] = []
    forests: list[ForestEntry] = []
    sims: dict = {}
    gaps = sorted(datasets, key=lambda g: GapSetting.parse(g).code)
    for gap in gaps:
        ds: TrajectoryDataset = datasets[gap]
        sims[gap] = {}
        for model in cfg.models:
            log.info("calibrating %s on %s gap", model, gap)
            res = calibrate(model, ds, cfg.bounds_for(model), cfg.x0_for(model), cfg.window, opt, sim_cfg, jobs=jobs)
            calibs.append(res)
            sims[gap][model] = simulate(make_params(model, res.best_params), ds, cfg=sim_cfg)
            if out is not None:
                (out / f"calibration_{model}_{gap}.json").write_text(res.dumps())
        if cfg.rf:
            fcfg = cfg.forest_config()
            log.info("training forests on %s gap", gap)
            acc_model, _, acc_test = train_and_evaluate(
                build_features(ds, "accel"), fcfg, cfg.forest_fraction, cfg.forest_split, jobs=jobs)
            sp_model, _, sp_test = train_and_evaluate(
                build_features(ds, "spacing"), fcfg, cfg.forest_fraction, cfg.forest_split, jobs=jobs)
            model_file = None
            if out is not None:
                model_file = f"forest_accel_{gap}.json"
                acc_model.save(out / model_file)
                sp_model.save(out / f"forest_spacing_{gap}.json")
            forests.append(ForestEntry(gap, acc_model, acc_test, sp_model, sp_test, model_file))
            sims[gap]["rf"] = forest_trace(acc_model, ds, sp_model)

    report = build_report(calibs, forests, datasets, gaps=gaps,
                          models=(["rf"] if cfg.rf else []) + [m for m in ("cacc", "ovrv", "ovm", "idm") if m in cfg.models])
    if out is not None:
        (out / "report.json").write_text(report.dumps())
        export_plot_data(report, sims, datasets, out, svg=cfg.svg)
    return PipelineResult(report, calibs, forests, datasets, sims)


# reference drivers for the synthetic three-gap benchmark: a delayed IDM whose
# headway grows with the gap preset, so no undelayed model reproduces it exactly
BENCHMARK_DRIVERS = {
    "medium": {"model": "idm", "params": [30.0, 1.2, 4.0, 1.5, 2.0], "reaction_delay_s": 0.5},
    "long": {"model": "idm", "params": [30.0, 1.7, 4.0, 1.5, 2.0], "reaction_delay_s": 0.5},
    "xlong": {"model": "idm", "params": [30.0, 2.2, 4.0, 1.5, 2.0], "reaction_delay_s": 0.5},
}


def synthesize(spec, seed: int = 42) -> TrajectoryDataset:
    """Leader profile from ``spec`` plus its ``follower`` block, if any.

    The follower block holds ``model``, ``params`` and optionally
    ``reaction_delay_s``, ``spacing_noise``, ``speed_noise``.
    """
    from .simulator import synthesize_follower
    from .trajectory import synth_leader_profile

    ds = synth_leader_profile(spec, seed)
    if spec.follower:
        f = dict(spec.follower)
        try:
            params = make_params(f.pop("model"), f.pop("params"))
        except KeyError as exc:
            raise ConfigError(f"follower block needs {exc.args[0]!r}") from None
        ds = synthesize_follower(ds, params, seed=seed + 1, **f)
    return ds


def synthetic_benchmark(seed: int = 42, duration_s: float = 400.0, spacing_noise: float = 0.05) -> dict:
    """Three gap datasets (medium, long, xlong) with 25 Hz speed-fluctuation episodes."""
    from .trajectory import ScenarioSpec

    out = {}
    free_speeds = {"medium": 26.8224, "long": 24.5872, "xlong": 20.1168}
    for i, (gap, driver) in enumerate(BENCHMARK_DRIVERS.items()):
        spec = ScenarioSpec(
            free_flow_speed=free_speeds[gap],
            congested_speed=15.6464,
            repetitions=int(duration_s // 60),
            free_hold_s=25.0,
            congested_hold_s=10.0,
            duration_s=duration_s,
            gap=gap,
            label=f"benchmark-{gap}",
            follower={**driver, "spacing_noise": spacing_noise},
        )
        out[gap] = synthesize(spec, seed + SYNTH_SEED_OFFSET + i)
    return out
