"""Command-line entry point: ``evfollow <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from .calibration import Bounds, CalibrationError, CalibrationResult, OptimizerConfig, calibrate, default_bounds, rmse_spacing
from .forest import ForestConfig, ForestModel, build_features, concat_tables, evaluate, train_and_evaluate
from .models import MODEL_KINDS, ModelError, make_params, params_from_json
from .pipeline import (
    FOREST_SEED_OFFSET,
    OPTIMIZER_SEED_OFFSET,
    SYNTH_SEED_OFFSET,
    ConfigError,
    RunConfig,
    default_out_dir,
    run_pipeline,
    synthesize,
)
from .simulator import CollisionError, SimConfig, simulate
from .trajectory import IngestConfig, ScenarioSpec, TrajectoryError, ingest_raw, write_canonical

log = logging.getLogger("evfollow")


class UsageError(Exception):
    pass


def _read_json(path: str, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from exc


def _build(cls, d: dict, what: str):
    try:
        return cls(**d)
    except TypeError as exc:
        raise UsageError(f"bad {what}: {exc}") from None


def _load(path: str, gap=None):
    return ingest_raw(path, IngestConfig(gap=gap))


def _out_dir(args) -> Path:
    out = Path(args.out or default_out_dir())
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------- subcommands


def cmd_ingest(args) -> int:
    ds = _load(args.input, args.gap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.input) as fh:
        header = fh.readline().strip().split(",")
    canonical = header[:5] == ["time_s", "leader_speed_mps", "follower_speed_mps", "spacing_m", "gap_setting"]
    if canonical and args.gap is None and Path(args.input).resolve() != out.resolve():
        shutil.copyfile(args.input, out)
    else:
        write_canonical(ds, out)
    print(f"samples: {len(ds)}")
    print(f"duration: {ds.duration:.2f} s")
    print(f"dt: {ds.dt:.6g} s ({1.0 / ds.dt:.1f} Hz detected)")
    print(f"gap: {ds.gap.value}")
    print(f"written: {out}")
    return 0


def cmd_synth(args) -> int:
    spec = ScenarioSpec.from_json(Path(args.spec).read_text()) if args.spec else ScenarioSpec()
    ds = synthesize(spec, args.seed + SYNTH_SEED_OFFSET)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_canonical(ds, out)
    print(f"synthetic {ds.gap.value} scenario: {len(ds)} samples, {ds.duration:.2f} s -> {out}")
    return 0


def cmd_calibrate(args) -> int:
    ds = _load(args.data, args.gap)
    model = args.model
    if args.bounds:
        b = _read_json(args.bounds, "bounds file")
        bounds = Bounds.from_json(b.get(model, b))
    else:
        bounds = default_bounds(model)
    x0 = None
    if args.x0 and args.x0 != "mid":
        x0 = _read_json(args.x0, "x0 file")
        x0 = x0.get("params", x0) if isinstance(x0, dict) else x0
    opt = OptimizerConfig(seed=args.seed + OPTIMIZER_SEED_OFFSET)
    if args.config:
        d = {"seed": args.seed + OPTIMIZER_SEED_OFFSET, **_read_json(args.config, "optimizer config")}
        opt = _build(OptimizerConfig, d, "optimizer config")
    if args.starts is not None:
        opt.starts = args.starts
    res = calibrate(model, ds, bounds, x0, args.window, opt, jobs=args.jobs)
    out = _out_dir(args) / f"calibration_{model}_{ds.gap.value}.json"
    out.write_text(res.dumps())
    names = ", ".join(f"{n}={v:.4g}" for n, v in zip(make_params(model, res.best_params).names, res.best_params))
    print(f"{model} on {ds.gap.value}: best subset {res.best_subset} of {len(res.per_subset)}, "
          f"rmse {res.best_rmse:.6g} m (full dataset {res.full_rmse:.6g} m)")
    print(f"params: {names}")
    print(f"written: {out}")
    return 0


def cmd_simulate(args) -> int:
    ds = _load(args.data, args.gap)
    obj = _read_json(args.params, "parameter file")
    if "best_params" in obj:
        params = CalibrationResult.from_json(obj).params
    else:
        params = params_from_json(obj)
    cfg = SimConfig(collision_policy=args.collision_policy)
    if args.no_clamp:
        cfg = SimConfig.unclamped(collision_policy=args.collision_policy)
    sim = simulate(params, ds, cfg=cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sim.to_csv(out)
    print(f"{params.kind}: {len(sim)} steps, spacing rmse vs data {rmse_spacing(sim, ds):.6g} m, "
          f"{len(sim.collision_events)} collision samples -> {out}")
    return 0


def _forest_config(args) -> ForestConfig:
    d = {"seed": args.seed + FOREST_SEED_OFFSET}
    if args.forest_config:
        d.update(_read_json(args.forest_config, "forest config"))
    if args.trees is not None:
        d["n_trees"] = args.trees
    return _build(ForestConfig, d, "forest config")


def cmd_rf_train(args) -> int:
    tables = [build_features(_load(p), args.target, args.smooth) for p in args.data]
    table = concat_tables(tables) if len(tables) > 1 else tables[0]
    model, train, test = train_and_evaluate(table, _forest_config(args), args.fraction, args.split, jobs=args.jobs)
    out = _out_dir(args)
    model_path = out / f"forest_{args.target}.json"
    model.save(model_path)
    unit = "m/s^2" if args.target == "accel" else "m"
    report = {
        "target": args.target,
        "unit": unit,
        "model_file": model_path.name,
        "split": args.split,
        "fraction": args.fraction,
        "n_train": len(train),
        "n_test": len(test),
        "train": {"rmse": model.train_metrics.rmse, "r2": model.train_metrics.r2},
        "test": {"rmse": model.test_metrics.rmse, "r2": model.test_metrics.r2},
        "feature_importances": model.feature_importances(),
    }
    rep_path = out / f"forest_{args.target}_report.json"
    rep_path.write_text(json.dumps(report, indent=2) + "\n")
    print(f"rf {args.target}: train rmse {model.train_metrics.rmse:.6g} {unit}, "
          f"test rmse {model.test_metrics.rmse:.6g} {unit}, test r2 {model.test_metrics.r2}")
    print(f"written: {model_path}, {rep_path}")
    return 0


def cmd_rf_eval(args) -> int:
    model = ForestModel.load(args.model)
    target = model.target or "accel"
    tables = [build_features(_load(p), target, args.smooth) for p in args.data]
    table = concat_tables(tables) if len(tables) > 1 else tables[0]
    m = evaluate(model, table.X, table.y)
    print(json.dumps({"target": target, "n": len(table), "rmse": m.rmse, "r2": m.r2}, indent=2))
    return 0


def cmd_report(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.data:
        for item in args.data:
            gap, _, path = item.partition("=")
            if not path:
                raise UsageError(f"--data expects GAP=PATH, got {item!r}")
            cfg.data[gap] = path
    if args.models:
        cfg.models = args.models.split(",")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.svg:
        cfg.svg = True
    if args.no_rf:
        cfg.rf = False
    cfg.validate(check_paths=True)
    out = Path(args.out or cfg.output_dir or default_out_dir())
    result = run_pipeline(cfg, jobs=args.jobs, out_dir=out)
    rep = result.report
    width = max(len(r[0]) for r in rep.table_rows())
    print(f"{'model':<{width}}  " + "  ".join(f"{g:>28}" for g in rep.gaps))
    for row in rep.table_rows():
        print(f"{row[0]:<{width}}  " + "  ".join(f"{row[1 + 2 * i + 1]:>28}" for i in range(len(rep.gaps))))
    print(f"written: {out / 'report.json'}")
    if rep.absent:
        print("absent cells: " + ", ".join(f"{g}/{m}" for g, m in rep.absent), file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evfollow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def common(sp, seed=True, jobs=False, out=False):
        if seed:
            sp.add_argument("--seed", type=int, default=42, help="global seed (default 42)")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="parallel workers (default 1)")
        if out:
            sp.add_argument("--out", help="output directory (default $EVFOLLOW_OUT or ./evfollow_out)")

    sp = sub.add_parser("ingest", help="convert a raw GPS or canonical CSV to canonical form")
    sp.add_argument("input")
    sp.add_argument("--out", required=True, help="canonical CSV to write")
    sp.add_argument("--gap", help="override the gap setting column")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("synth", help="generate a synthetic scenario CSV from a ScenarioSpec JSON")
    sp.add_argument("--spec", help="ScenarioSpec JSON (defaults used when omitted)")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("calibrate", help="calibrate one classical model on one dataset")
    sp.add_argument("--data", required=True, help="trajectory CSV")
    sp.add_argument("--model", required=True, choices=MODEL_KINDS)
    sp.add_argument("--window", type=float, default=200.0, help="subset length in seconds (default 200)")
    sp.add_argument("--bounds", help="JSON with lower/upper (or keyed by model)")
    sp.add_argument("--x0", default="mid", help="'mid' (box midpoint) or a JSON parameter file")
    sp.add_argument("--config", help="optimizer JSON: max_iter, tol, fd_step, starts, seed")
    sp.add_argument("--starts", type=int, help="number of optimizer starts")
    sp.add_argument("--gap", help="override the gap setting")
    common(sp, jobs=True, out=True)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("simulate", help="simulate a follower along a dataset's leader profile")
    sp.add_argument("--data", required=True)
    sp.add_argument("--params", required=True, help="parameter JSON {model, params} or a calibration result")
    sp.add_argument("--out", required=True, help="simulation CSV to write")
    sp.add_argument("--collision-policy", default="record-and-continue", choices=["record-and-continue", "abort"])
    sp.add_argument("--no-clamp", action="store_true", help="disable acceleration and speed clamps")
    sp.add_argument("--gap", help="override the gap setting")
    sp.set_defaults(func=cmd_simulate)

    for name, func, helptext in (
        ("rf-train", cmd_rf_train, "train a random forest on one or more datasets"),
        ("rf-eval", cmd_rf_eval, "evaluate a saved forest on datasets"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--data", required=True, nargs="+")
        sp.add_argument("--smooth", type=int, default=1, help="moving-average window for acceleration targets")
        if name == "rf-train":
            sp.add_argument("--target", choices=["accel", "spacing"], default="accel")
            sp.add_argument("--split", choices=["chronological", "random"], default="chronological")
            sp.add_argument("--fraction", type=float, default=0.8, help="training fraction (default 0.8)")
            sp.add_argument("--forest-config", help="ForestConfig JSON")
            sp.add_argument("--trees", type=int, help="override n_trees")
            common(sp, jobs=True, out=True)
        else:
            sp.add_argument("--model", required=True, help="forest model file")
        sp.set_defaults(func=func)

    sp = sub.add_parser("report", help="run the full comparison and write the report grid")
    sp.add_argument("--config", help="run-config JSON")
    sp.add_argument("--data", nargs="+", help="GAP=PATH entries (override the config)")
    sp.add_argument("--models", help="comma-separated classical models")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--svg", action="store_true", help="also render SVG charts")
    sp.add_argument("--no-rf", action="store_true", help="skip the random forests")
    common(sp, seed=False, jobs=True, out=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, TrajectoryError, ModelError, ValueError) as exc:
        print(f"evfollow {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CalibrationError, CollisionError, OSError) as exc:
        print(f"evfollow {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
