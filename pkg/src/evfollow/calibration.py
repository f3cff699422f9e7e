"""Spacing-RMSE calibration of the classical models under box constraints.

Each subset is fitted independently with L-BFGS-B (scipy) driven by our own
forward-difference gradient, which never steps outside the box. The subset
with the lowest RMSE supplies the reported parameters.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize

from .models import MODEL_KINDS, ModelParams, make_params, params_class
from .simulator import SimConfig, SimResult, initial_state_from_data, simulate, simulated_spacing
from .trajectory import TrajectoryDataset, slice_subsets

TIE_TOLERANCE = 1e-12


class CalibrationError(RuntimeError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Bounds:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lower)
        hi = tuple(float(x) for x in self.upper)
        if len(lo) != len(hi):
            raise ValueError(f"bounds dimension mismatch: {len(lo)} lower vs {len(hi)} upper")
        for i, (a, b) in enumerate(zip(lo, hi)):
            if not (math.isfinite(a) and math.isfinite(b) and a < b):
                raise ValueError(f"bound {i}: need finite lower < upper, got [{a}, {b}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def __len__(self):
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    def midpoint(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def clip(self, x) -> np.ndarray:
        return np.minimum(np.maximum(np.asarray(x, dtype=float), self.lo), self.hi)

    def as_scipy(self) -> list:
        return list(zip(self.lower, self.upper))

    def to_json(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_json(cls, obj) -> "Bounds":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(tuple(obj["lower"]), tuple(obj["upper"]))


_DEFAULT_BOUNDS = {
    "idm": ((20.0, 0.5, 1.0, 0.5, 0.5), (40.0, 3.0, 15.0, 2.0, 2.0)),
    "ovrv": ((0.01, 0.0, 0.0, 0.0), (2.0, 2.0, 20.0, 5.0)),
    "ovm": ((15.0, 0.1, 1.0), (40.0, 3.0, 30.0)),
    "cacc": ((0.0, 0.01, 1.0, 0.1), (1.0, 1.0, 15.0, 2.0)),
}


def default_bounds(kind: str) -> Bounds:
    """Default search box per model kind."""
    params_class(kind)
    lo, hi = _DEFAULT_BOUNDS[kind.lower()]
    return Bounds(lo, hi)


@dataclass
class OptimizerConfig:
    max_iter: int = 200
    tol: float = 1e-8
    fd_step: float = 1e-6
    starts: int = 1
    seed: int = 42

    @classmethod
    def from_json(cls, obj) -> "OptimizerConfig":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(**obj)


def rmse_spacing(sim: Union[SimResult, np.ndarray, Sequence[float]], exp: Union[TrajectoryDataset, np.ndarray, Sequence[float]]) -> float:
    """Root mean squared difference between simulated and observed spacing."""
    if isinstance(sim, SimResult) and isinstance(exp, TrajectoryDataset):
        if len(sim.time) != len(exp.time) or not np.array_equal(sim.time, exp.time):
            raise AlignmentError(f"simulated ({len(sim.time)}) and experimental ({len(exp.time)}) time axes differ")
    s_sim = np.asarray(sim.spacing if isinstance(sim, SimResult) else sim, dtype=float)
    s_exp = np.asarray(exp.spacing if isinstance(exp, TrajectoryDataset) else exp, dtype=float)
    if s_sim.shape != s_exp.shape:
        raise AlignmentError(f"length mismatch: {s_sim.shape[0]} simulated vs {s_exp.shape[0]} observed")
    if s_sim.size == 0:
        raise AlignmentError("empty series")
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.sqrt(np.mean((s_sim - s_exp) ** 2)))


def fd_gradient(f, x: np.ndarray, fx: float, bounds: Bounds, rel_step: float = 1e-6) -> np.ndarray:
    """Forward-difference gradient with step ``rel_step * max(|x_i|, 1)``.

    Steps that would leave the box are taken backwards instead.
    """
    g = np.empty_like(x)
    hi = bounds.hi
    for i in range(len(x)):
        h = rel_step * max(abs(x[i]), 1.0)
        if x[i] + h > hi[i]:
            h = -h
        xp = x.copy()
        xp[i] = x[i] + h
        g[i] = (f(xp) - fx) / h
    return g


class SpacingObjective:
    """theta -> spacing RMSE of a simulation over one subset.

    Every evaluated point is kept in ``evaluated`` so callers can audit
    feasibility of the optimizer's iterates.
    """

    def __init__(self, kind: str, subset: TrajectoryDataset, sim_cfg: Optional[SimConfig] = None, record: bool = True):
        self.kind = kind
        self.subset = subset
        self.sim_cfg = sim_cfg or SimConfig()
        self.init = initial_state_from_data(subset)
        self.target = np.asarray(subset.spacing)
        self.record = record
        self.evaluated: list[np.ndarray] = []
        self.n_evals = 0

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        self.n_evals += 1
        if self.record:
            self.evaluated.append(theta.copy())
        params = make_params(self.kind, theta)
        s = simulated_spacing(params, self.subset, self.init, self.sim_cfg)
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.sqrt(np.mean((s - self.target) ** 2)))


@dataclass
class SubsetFit:
    index: int
    params: Optional[list]
    rmse: float
    converged: bool
    iterations: int
    n_evals: int = 0
    trace: list = field(default_factory=list)
    message: str = ""
    error: Optional[str] = None
    feasible_iterates: bool = True

    def to_json(self, with_trace: bool = False) -> dict:
        d = asdict(self)
        if not with_trace:
            d.pop("trace")
        return d


def _run_lbfgsb(obj: SpacingObjective, x0: np.ndarray, bounds: Bounds, cfg: OptimizerConfig):
    f0 = obj(x0)
    if not math.isfinite(f0):
        raise CalibrationError(
            f"objective is not finite at x0={list(x0)}; try a different start or tighter bounds"
        )

    def fun(x):
        x = np.asarray(x, dtype=float)
        fx = obj(x)
        return fx, fd_gradient(obj, x, fx, bounds, cfg.fd_step)

    trace = [f0]

    def callback(intermediate_result):
        trace.append(min(trace[-1], float(intermediate_result.fun)))

    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds.as_scipy(),
        callback=callback,
        options={"maxiter": cfg.max_iter, "ftol": cfg.tol, "gtol": 1e-12, "maxls": 40},
    )
    x = bounds.clip(res.x)
    fx = float(res.fun)
    if not np.array_equal(x, res.x):
        fx = obj(x)
    if f0 < fx:
        # a failed line search can leave the optimizer worse than its start
        x, fx = np.array(x0, dtype=float), f0
    trace.append(min(trace[-1], fx))
    return x, fx, trace, bool(res.success), int(res.nit), str(res.message)


def calibrate_subset(
    kind: str,
    subset: TrajectoryDataset,
    bounds: Optional[Bounds] = None,
    x0=None,
    opt_cfg: Optional[OptimizerConfig] = None,
    sim_cfg: Optional[SimConfig] = None,
    index: int = 0,
) -> SubsetFit:
    """Fit ``kind`` to one subset; ``x0`` defaults to the box midpoint.

    With ``opt_cfg.starts > 1`` the extra starts are drawn uniformly from the
    box using ``opt_cfg.seed + index`` and the best run is kept.
    """
    kind = kind.lower()
    bounds = bounds or default_bounds(kind)
    cfg = opt_cfg or OptimizerConfig()
    n = len(params_class(kind).names)
    if len(bounds) != n:
        raise ValueError(f"{kind} has {n} parameters but bounds have {len(bounds)}")
    x0 = bounds.midpoint() if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (n,):
        raise ValueError(f"x0 must have {n} entries, got {x0.shape}")
    if not bounds.contains(x0):
        raise ValueError(f"x0={list(x0)} lies outside the bounds")

    starts = [x0]
    if cfg.starts > 1:
        rng = np.random.default_rng(cfg.seed + index)
        starts += [rng.uniform(bounds.lo, bounds.hi) for _ in range(cfg.starts - 1)]

    obj = SpacingObjective(kind, subset, sim_cfg)
    best = None
    total_iter = 0
    for start in starts:
        x, fx, trace, ok, nit, msg = _run_lbfgsb(obj, start, bounds, cfg)
        total_iter += nit
        if best is None or fx < best[1]:
            best = (x, fx, trace, ok, msg)
    x, fx, trace, ok, msg = best
    feasible = all(bounds.contains(p) for p in obj.evaluated)
    return SubsetFit(
        index=index,
        params=[float(v) for v in x],
        rmse=float(fx),
        converged=ok,
        iterations=total_iter,
        n_evals=obj.n_evals,
        trace=[float(t) for t in trace],
        message=msg,
        feasible_iterates=feasible,
    )


@dataclass
class CalibrationResult:
    model: str
    bounds: Bounds
    best_params: list
    best_rmse: float
    best_subset: int
    full_rmse: Optional[float]
    per_subset: list
    objective_trace: list
    window: float
    gap: str = ""
    label: str = ""

    @property
    def params(self) -> ModelParams:
        return make_params(self.model, self.best_params)

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "gap": self.gap,
            "label": self.label,
            "window_s": self.window,
            "bounds": self.bounds.to_json(),
            "param_names": list(params_class(self.model).names),
            "best_params": self.best_params,
            "best_rmse": self.best_rmse,
            "best_subset": self.best_subset,
            "full_dataset_rmse": self.full_rmse,
            "per_subset": [s.to_json() for s in self.per_subset],
            "objective_trace": self.objective_trace,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    @classmethod
    def from_json(cls, obj) -> "CalibrationResult":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(
            model=obj["model"],
            bounds=Bounds.from_json(obj["bounds"]),
            best_params=obj["best_params"],
            best_rmse=obj["best_rmse"],
            best_subset=obj["best_subset"],
            full_rmse=obj.get("full_dataset_rmse"),
            per_subset=[SubsetFit(**s) for s in obj["per_subset"]],
            objective_trace=obj["objective_trace"],
            window=obj["window_s"],
            gap=obj.get("gap", ""),
            label=obj.get("label", ""),
        )


def _fit_one(args):
    kind, subset, bounds, x0, cfg, sim_cfg, index = args
    try:
        return calibrate_subset(kind, subset, bounds, x0, cfg, sim_cfg, index)
    except Exception as exc:  # recorded per subset, see calibrate()
        return SubsetFit(index=index, params=None, rmse=math.inf, converged=False,
                         iterations=0, error=f"{type(exc).__name__}: {exc}")


def select_best(fits: Sequence[SubsetFit]) -> SubsetFit:
    """Lowest RMSE wins; RMSEs within 1e-12 count as a tie, broken by lowest index."""
    ok = [f for f in fits if f.error is None and math.isfinite(f.rmse)]
    if not ok:
        raise CalibrationError("every subset failed: " + "; ".join(f"[{f.index}] {f.error}" for f in fits))
    low = min(f.rmse for f in ok)
    return min((f for f in ok if f.rmse <= low + TIE_TOLERANCE), key=lambda f: f.index)


def calibrate(
    kind: str,
    ds: TrajectoryDataset,
    bounds: Optional[Bounds] = None,
    x0=None,
    window: float = 200.0,
    opt_cfg: Optional[OptimizerConfig] = None,
    sim_cfg: Optional[SimConfig] = None,
    jobs: int = 1,
) -> CalibrationResult:
    """Calibrate on every ``window``-second slice and keep the best slice.

    Failing subsets are recorded with their error and skipped; the call only
    raises when all of them fail. ``full_dataset_rmse`` re-simulates the
    winning parameters over the whole of ``ds``.
    """
    kind = kind.lower()
    if kind not in MODEL_KINDS:
        params_class(kind)
    bounds = bounds or default_bounds(kind)
    cfg = opt_cfg or OptimizerConfig()
    subsets = slice_subsets(ds, window)
    tasks = [(kind, sub, bounds, x0, cfg, sim_cfg, i) for i, sub in enumerate(subsets)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fits = list(pool.map(_fit_one, tasks))
    else:
        fits = [_fit_one(t) for t in tasks]
    fits.sort(key=lambda f: f.index)
    best = select_best(fits)
    params = make_params(kind, best.params)
    full = rmse_spacing(simulate(params, ds, cfg=sim_cfg), ds)
    return CalibrationResult(
        model=kind,
        bounds=bounds,
        best_params=best.params,
        best_rmse=best.rmse,
        best_subset=best.index,
        full_rmse=full,
        per_subset=fits,
        objective_trace=list(best.trace),
        window=float(window),
        gap=ds.gap.value,
        label=ds.label,
    )
