"""Cross-model comparison: per-gap RMSE grid, residual summaries and plot exports."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .calibration import CalibrationResult
from .forest import FeatureTable, ForestModel, build_features
from .models import make_params, params_class
from .simulator import SimResult, simulate
from .trajectory import GapSetting, TrajectoryDataset, slice_subsets

log = logging.getLogger(__name__)

REPORT_FORMAT = "evfollow-report"
REPORT_VERSION = 1
MODEL_ORDER = ("rf", "cacc", "ovrv", "ovm", "idm")
GAP_ORDER = tuple(g.value for g in GapSetting)


class ReportError(ValueError):
    pass


def residuals(actual, predicted) -> np.ndarray:
    """actual - predicted, elementwise."""
    a = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if a.shape != p.shape:
        raise ReportError(f"length mismatch: {a.shape[0]} actual vs {p.shape[0]} predicted")
    return a - p


@dataclass(frozen=True)
class ResidualSummary:
    n: int
    mean: float
    std: float
    min: float
    max: float
    rmse: float

    @classmethod
    def of(cls, r) -> "ResidualSummary":
        r = np.asarray(r, dtype=float)
        if r.size == 0:
            raise ReportError("empty residual series")
        return cls(
            n=int(r.size),
            mean=float(np.mean(r)),
            std=float(np.std(r)),
            min=float(np.min(r)),
            max=float(np.max(r)),
            rmse=float(np.sqrt(np.mean(r ** 2))),
        )

    def to_json(self) -> dict:
        return {"n": self.n, "mean": self.mean, "std": self.std, "min": self.min, "max": self.max, "rmse": self.rmse}


@dataclass
class ResidualSeries:
    time: np.ndarray
    actual: np.ndarray
    predicted: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return residuals(self.actual, self.predicted)


@dataclass
class Cell:
    gap: str
    model: str
    status: str = "absent"
    metric: Optional[str] = None
    unit: Optional[str] = None
    rmse: Optional[float] = None
    params: Optional[list] = None
    param_names: Optional[list] = None
    residuals: Optional[ResidualSummary] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        if self.status == "absent":
            return {"status": "absent"}
        out = {
            "status": self.status,
            "metric": self.metric,
            "unit": self.unit,
            "rmse": self.rmse,
            "residuals": self.residuals.to_json(),
        }
        if self.params is not None:
            out["param_names"] = self.param_names
            out["params"] = self.params
        if self.extra:
            out["extra"] = self.extra
        return out

    @classmethod
    def from_json(cls, gap: str, model: str, d: dict) -> "Cell":
        if d.get("status") == "absent":
            return cls(gap, model)
        return cls(
            gap=gap,
            model=model,
            status=d["status"],
            metric=d["metric"],
            unit=d["unit"],
            rmse=d["rmse"],
            params=d.get("params"),
            param_names=d.get("param_names"),
            residuals=ResidualSummary(**d["residuals"]),
            extra=d.get("extra", {}),
        )


@dataclass
class ComparisonReport:
    """Table-shaped grid of (gap, model) cells.

    ``series`` holds the residual series behind each present cell; it is
    exported to CSV but not embedded in the JSON.
    """

    gaps: list
    models: list
    cells: dict
    series: dict = field(default_factory=dict, repr=False)

    def cell(self, gap: str, model: str) -> Cell:
        return self.cells[(gap, model)]

    @property
    def absent(self) -> list:
        return [k for k, c in self.cells.items() if c.status == "absent"]

    def to_json(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "gaps": list(self.gaps),
            "models": list(self.models),
            "grid": {
                g: {m: self.cells[(g, m)].to_json() for m in self.models}
                for g in self.gaps
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ComparisonReport":
        d = json.loads(text)
        if d.get("format") != REPORT_FORMAT:
            raise ReportError(f"not a comparison report (format={d.get('format')!r})")
        cells = {
            (g, m): Cell.from_json(g, m, d["grid"][g][m])
            for g in d["gaps"]
            for m in d["models"]
        }
        return cls(gaps=d["gaps"], models=d["models"], cells=cells)

    def table_rows(self) -> list:
        """One row per model with (params, rmse) pairs per gap, ready for printing."""
        rows = []
        for m in self.models:
            row = [m.upper() if m != "rf" else "RF Regressor"]
            for g in self.gaps:
                c = self.cells[(g, m)]
                if c.status == "absent":
                    row += ["--", "--"]
                else:
                    p = "--" if c.params is None else "[" + ", ".join(f"{v:.2f}" for v in c.params) + "]"
                    row += [p, f"{c.rmse:.4g} {c.unit}"]
            rows.append(row)
        return rows


@dataclass
class ForestEntry:
    """Held-out evaluation of one gap's acceleration forest."""

    gap: str
    model: ForestModel
    test: FeatureTable
    spacing_model: Optional[ForestModel] = None
    spacing_test: Optional[FeatureTable] = None
    model_file: Optional[str] = None


def _sorted_gaps(gaps) -> list:
    return sorted(set(gaps), key=lambda g: GAP_ORDER.index(g) if g in GAP_ORDER else len(GAP_ORDER))


def _calibration_cell(c: CalibrationResult, ds: TrajectoryDataset) -> tuple:
    subset = slice_subsets(ds, c.window)[c.best_subset]
    sim = simulate(make_params(c.model, c.best_params), subset)
    series = ResidualSeries(np.asarray(subset.time), np.asarray(subset.spacing), sim.spacing)
    summary = ResidualSummary.of(series.values)
    cell = Cell(
        gap=c.gap,
        model=c.model,
        status="ok",
        metric="spacing",
        unit="m",
        rmse=summary.rmse,
        params=[float(v) for v in c.best_params],
        param_names=list(params_class(c.model).names),
        residuals=summary,
        extra={"best_subset": c.best_subset, "subset_rmse": c.best_rmse, "full_dataset_rmse": c.full_rmse},
    )
    return cell, series


def _forest_cell(f: ForestEntry) -> tuple:
    pred = f.model.predict_matrix(f.test.X)
    series = ResidualSeries(np.asarray(f.test.time), np.asarray(f.test.y), pred)
    summary = ResidualSummary.of(series.values)
    extra = {"r2": f.model.test_metrics.r2 if f.model.test_metrics else None}
    if f.model_file:
        extra["model_file"] = f.model_file
    if f.spacing_model is not None and f.spacing_model.test_metrics is not None:
        extra["spacing_model"] = {
            "metric": "spacing",
            "unit": "m",
            "rmse": f.spacing_model.test_metrics.rmse,
            "r2": f.spacing_model.test_metrics.r2,
        }
    cell = Cell(
        gap=f.gap,
        model="rf",
        status="ok",
        metric="accel",
        unit="m/s^2",
        rmse=summary.rmse,
        residuals=summary,
        extra=extra,
    )
    return cell, series


def build_report(
    calibs: Sequence[CalibrationResult],
    forests: Sequence[ForestEntry],
    datasets: Mapping[str, TrajectoryDataset],
    gaps: Optional[Sequence[str]] = None,
    models: Optional[Sequence[str]] = None,
) -> ComparisonReport:
    """Assemble the gap x model grid.

    Classical cells report the spacing RMSE on each model's winning subset in
    meters; RF cells report held-out acceleration RMSE in m/s^2, with the
    spacing forest's metrics attached when available. Cells with no input
    are marked absent.
    """
    if not calibs and not forests:
        raise ReportError("nothing to report: no calibrations and no forests")
    cells, series = {}, {}
    for c in calibs:
        key = (c.gap, c.model)
        if key in cells:
            raise ReportError(f"duplicate cell for gap={c.gap} model={c.model}")
        if c.gap not in datasets:
            raise ReportError(f"no dataset for gap {c.gap!r} (needed by the {c.model} calibration)")
        cells[key], series[key] = _calibration_cell(c, datasets[c.gap])
    for f in forests:
        key = (f.gap, "rf")
        if key in cells:
            raise ReportError(f"duplicate cell for gap={f.gap} model=rf")
        cells[key], series[key] = _forest_cell(f)

    gaps = list(gaps) if gaps else _sorted_gaps(g for g, _ in cells)
    if models is not None:
        models = list(models)
    else:
        present = {m for _, m in cells}
        models = [m for m in MODEL_ORDER if m in present]
    for g in gaps:
        for m in models:
            cells.setdefault((g, m), Cell(g, m))
    cells = {(g, m): cells[(g, m)] for g in gaps for m in models}
    return ComparisonReport(gaps=gaps, models=models, cells=cells, series=series)


# --------------------------------------------------------------------------- traces


def forest_trace(accel_model: ForestModel, ds: TrajectoryDataset,
                 spacing_model: Optional[ForestModel] = None) -> SimResult:
    """RF counterpart of a simulation trace over ``ds``.

    Speed is the one-step prediction ``v[k-1] + a_hat[k] dt`` from recorded
    speeds; spacing comes from the spacing forest (recorded spacing if none).
    """
    acc_tab = build_features(ds, "accel")
    a_hat = accel_model.predict_matrix(acc_tab.X)
    v = np.asarray(ds.follower_speed, dtype=float)
    speed = np.empty_like(v)
    speed[0] = v[0]
    speed[1:] = v[:-1] + a_hat * ds.dt
    accel = np.concatenate([[a_hat[0]], a_hat])
    if spacing_model is not None:
        spacing = spacing_model.predict_matrix(build_features(ds, "spacing").X)
    else:
        spacing = np.asarray(ds.spacing, dtype=float).copy()
    return SimResult(time=np.asarray(ds.time).copy(), speed=speed, spacing=spacing, accel=accel, model_tag="rf")


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def export_plot_data(
    report: ComparisonReport,
    sims: Mapping[str, Mapping[str, SimResult]],
    experiments: Mapping[str, TrajectoryDataset],
    out_dir,
    svg: bool = False,
) -> list:
    """Write per-gap comparison CSVs (and optional SVG charts) under ``out_dir/<gap>/``.

    Returns the written paths.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = []
    for gap in report.gaps:
        gdir = out_dir / gap
        gdir.mkdir(exist_ok=True)
        gap_sims = sims.get(gap, {})
        models = [m for m in report.models if m in gap_sims]
        exp = experiments.get(gap)
        if not models:
            log.warning("no simulated traces for gap %s; writing header-only files", gap)
        for name, attr, exp_attr in (
            ("spacing_compare.csv", "spacing", "spacing"),
            ("speed_compare.csv", "speed", "follower_speed"),
        ):
            header = ["time_s", *models, "experimental"]
            rows = []
            if models and exp is not None:
                for m in models:
                    if not np.array_equal(gap_sims[m].time, exp.time):
                        raise ReportError(f"{m} trace for gap {gap} is not aligned with the experiment")
                cols = [exp.time] + [getattr(gap_sims[m], attr) for m in models] + [getattr(exp, exp_attr)]
                rows = [[_fmt(x) for x in r] for r in zip(*cols)]
            path = gdir / name
            _write_csv(path, header, rows)
            written.append(path)
        for m in report.models:
            key = (gap, m)
            if key not in report.series:
                continue
            s = report.series[key]
            r = s.values
            path = gdir / f"residuals_{m}.csv"
            _write_csv(path, ["time_s", "actual", "predicted", "residual"],
                       [[_fmt(a), _fmt(b), _fmt(c), _fmt(d)] for a, b, c, d in zip(s.time, s.actual, s.predicted, r)])
            written.append(path)
        bar_rows = []
        for m in MODEL_ORDER:
            if m not in report.models:
                continue
            c = report.cells[(gap, m)]
            if c.status != "absent":
                bar_rows.append([m, _fmt(c.rmse), c.unit])
        path = gdir / "rmse_bar.csv"
        _write_csv(path, ["model", "rmse", "unit"], bar_rows)
        written.append(path)
        if svg:
            from .svg import bar_chart, line_chart

            if models and exp is not None:
                for name, attr, exp_attr, ylab in (
                    ("spacing_compare.svg", "spacing", "spacing", "spacing [m]"),
                    ("speed_compare.svg", "speed", "follower_speed", "speed [m/s]"),
                ):
                    series = {m: getattr(gap_sims[m], attr) for m in models}
                    series["experimental"] = getattr(exp, exp_attr)
                    path = gdir / name
                    path.write_text(line_chart(np.asarray(exp.time), series, f"{gap} gap", ylab))
                    written.append(path)
            if bar_rows:
                path = gdir / "rmse_bar.svg"
                path.write_text(bar_chart([r[0] for r in bar_rows], [float(r[1]) for r in bar_rows], f"RMSE, {gap} gap"))
                written.append(path)
    return written


def rmse_from_residual_csv(path) -> float:
    with Path(path).open(newline="") as fh:
        r = [float(row["residual"]) for row in csv.DictReader(fh)]
    return math.sqrt(sum(x * x for x in r) / len(r))
