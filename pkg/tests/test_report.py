import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evfollow.calibration import calibrate
from evfollow.forest import ForestConfig, build_features, train_and_evaluate
from evfollow.pipeline import RunConfig, run_pipeline, synthetic_benchmark
from evfollow.report import (
    MODEL_ORDER,
    ComparisonReport,
    ForestEntry,
    ReportError,
    ResidualSummary,
    build_report,
    export_plot_data,
    residuals,
    rmse_from_residual_csv,
)
from evfollow.simulator import simulate


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    cfg = RunConfig(optimizer={"max_iter": 20}, forest={"n_trees": 10})
    res = run_pipeline(cfg, datasets=synthetic_benchmark(duration_s=200.0), out_dir=out)
    return res, out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestResiduals:
    def test_equal(self):
        assert np.all(residuals([1.0, 2.0], [1.0, 2.0]) == 0)

    def test_offset(self):
        a = np.array([3.0, 4.5, -1.0])
        assert np.all(residuals(a, a - 1) == 1.0)

    def test_mismatch(self):
        with pytest.raises(ReportError):
            residuals([1, 2], [1])

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40))
    def test_summary_order(self, xs):
        s = ResidualSummary.of(xs)
        assert s.min <= s.mean + 1e-9 and s.mean <= s.max + 1e-9
        assert s.std >= 0 and s.rmse >= 0

    def test_unbiased_forest_mean(self):
        rng = np.random.default_rng(4)
        n = 3000
        X = rng.uniform(-1, 1, (n, 2))
        sigma = 0.2
        y = X[:, 0] + rng.normal(0, sigma, n)
        from evfollow.forest import FeatureTable
        table = FeatureTable(X, y, ("a", "b"), np.arange(n) * 0.04, "accel")
        m, _, test = train_and_evaluate(table, ForestConfig(n_trees=20), split="random")
        r = residuals(test.y, m.predict_matrix(test.X))
        assert abs(r.mean()) < 3 * sigma / np.sqrt(len(r))


class TestGrid:
    def test_fifteen_cells(self, grid):
        res, _ = grid
        rep = res.report
        assert rep.gaps == ["medium", "long", "xlong"]
        assert rep.models == list(MODEL_ORDER)
        assert len(rep.cells) == 15 and not rep.absent
        for c in rep.cells.values():
            assert c.unit in ("m", "m/s^2")
            assert c.residuals.min <= c.residuals.mean <= c.residuals.max

    def test_units(self, grid):
        rep = grid[0].report
        assert rep.cell("long", "rf").unit == "m/s^2"
        assert rep.cell("long", "rf").extra["spacing_model"]["unit"] == "m"
        assert rep.cell("long", "cacc").unit == "m"
        assert len(rep.cell("long", "idm").params) == 5

    def test_json_roundtrip(self, grid):
        text = grid[0].report.dumps()
        assert ComparisonReport.loads(text).dumps() == text

    def test_written_report_matches(self, grid):
        res, out = grid
        assert (out / "report.json").read_text() == res.report.dumps()
        d = json.loads((out / "report.json").read_text())
        assert d["format"] == "evfollow-report" and set(d["grid"]) == {"medium", "long", "xlong"}

    def test_rmse_from_residual_files(self, grid):
        res, out = grid
        for (g, m), c in res.report.cells.items():
            assert rmse_from_residual_csv(out / g / f"residuals_{m}.csv") == pytest.approx(c.rmse, abs=1e-9)
            rows = read_csv(out / g / f"residuals_{m}.csv")[1:]
            r = np.array([float(x[3]) for x in rows])
            assert r.mean() == pytest.approx(c.residuals.mean, abs=1e-9)
            assert r.std() == pytest.approx(c.residuals.std, abs=1e-9)

    def test_compare_csvs(self, grid):
        res, out = grid
        rows = read_csv(out / "long" / "spacing_compare.csv")
        assert rows[0] == ["time_s", "rf", "cacc", "ovrv", "ovm", "idm", "experimental"]
        assert len(rows) == len(res.datasets["long"]) + 1
        assert read_csv(out / "long" / "speed_compare.csv")[0] == rows[0]

    def test_bar_order(self, grid):
        rows = read_csv(grid[1] / "medium" / "rmse_bar.csv")
        assert [r[0] for r in rows[1:]] == ["rf", "cacc", "ovrv", "ovm", "idm"]

    def test_classical_cell_uses_winning_subset(self, grid):
        res = grid[0]
        for c in res.calibrations:
            cell = res.report.cell(c.gap, c.model)
            assert cell.rmse == pytest.approx(c.best_rmse, abs=1e-9)
            assert cell.extra["full_dataset_rmse"] == c.full_rmse

    def test_table_rows(self, grid):
        rows = grid[0].report.table_rows()
        assert [r[0] for r in rows] == ["RF Regressor", "CACC", "OVRV", "OVM", "IDM"]
        assert all(len(r) == 7 for r in rows)


@pytest.fixture(scope="module")
def one():
    ds = synthetic_benchmark(duration_s=200.0)["long"]
    return ds, calibrate("cacc", ds)


class TestSmallReports:
    def test_single_cell(self, one):
        ds, cal = one
        rep = build_report([cal], [], {"long": ds})
        assert list(rep.cells) == [("long", "cacc")]
        assert rep.cell("long", "cacc").params == cal.best_params

    def test_duplicate(self, one):
        ds, cal = one
        with pytest.raises(ReportError):
            build_report([cal, cal], [], {"long": ds})

    def test_absent_marked(self, one):
        ds, cal = one
        rep = build_report([cal], [], {"long": ds}, gaps=["medium", "long"], models=["cacc", "idm"])
        assert sorted(rep.absent) == [("long", "idm"), ("medium", "cacc"), ("medium", "idm")]
        assert json.loads(rep.dumps())["grid"]["medium"]["cacc"] == {"status": "absent"}
        assert rep.table_rows()[1][1:3] == ["--", "--"]

    def test_nothing(self):
        with pytest.raises(ReportError):
            build_report([], [], {})

    def test_two_models_column_count(self, one, tmp_path):
        ds, cal = one
        cal2 = calibrate("ovrv", ds)
        rep = build_report([cal, cal2], [], {"long": ds})
        sims = {"long": {"cacc": simulate(cal.params, ds), "ovrv": simulate(cal2.params, ds)}}
        export_plot_data(rep, sims, {"long": ds}, tmp_path)
        header = read_csv(tmp_path / "long" / "spacing_compare.csv")[0]
        assert header == ["time_s", "cacc", "ovrv", "experimental"]

    def test_empty_model_list(self, one, tmp_path, caplog):
        ds, cal = one
        rep = build_report([cal], [], {"long": ds}, models=[])
        export_plot_data(rep, {}, {"long": ds}, tmp_path)
        assert read_csv(tmp_path / "long" / "spacing_compare.csv") == [["time_s", "experimental"]]
        assert read_csv(tmp_path / "long" / "rmse_bar.csv") == [["model", "rmse", "unit"]]
        assert "header-only" in caplog.text

    def test_svg_deterministic(self, one, tmp_path):
        ds, cal = one
        rep = build_report([cal], [], {"long": ds})
        sims = {"long": {"cacc": simulate(cal.params, ds)}}
        export_plot_data(rep, sims, {"long": ds}, tmp_path / "a", svg=True)
        export_plot_data(rep, sims, {"long": ds}, tmp_path / "b", svg=True)
        for name in ("spacing_compare.svg", "speed_compare.svg", "rmse_bar.svg"):
            a = (tmp_path / "a" / "long" / name).read_text()
            assert a.startswith("<svg") and a == (tmp_path / "b" / "long" / name).read_text()

    def test_rf_only(self, one):
        ds, _ = one
        m, _, test = train_and_evaluate(build_features(ds, "accel"), ForestConfig(n_trees=5))
        rep = build_report([], [ForestEntry("long", m, test)], {"long": ds})
        assert rep.models == ["rf"] and rep.cell("long", "rf").metric == "accel"
