"""Random-forest regression for follower acceleration and spacing.

Trees are CART regressors grown on bootstrap resamples: every split picks,
among a random subset of features, the threshold minimising the summed
squared error of the two children. Growth runs in a numba kernel; trees are
stored as flat arrays and serialise to versioned JSON.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numba
import numpy as np
from scipy.ndimage import uniform_filter1d

from .trajectory import TrajectoryDataset

MODEL_FORMAT = "evfollow-forest"
MODEL_VERSION = 1

FEATURES = ("spacing", "follower_speed", "leader_speed", "delta_v", "gap_code", "fluctuation_phase")
ACCEL_FEATURES = FEATURES
SPACING_FEATURES = FEATURES[1:]

# leader deceleration onset detector for fluctuation_phase
ONSET_DECEL = -0.3
ONSET_SUSTAIN_S = 1.0


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureRow:
    spacing: float
    follower_speed: float
    leader_speed: float
    delta_v: float
    gap_code: int
    fluctuation_phase: float = 0.0

    def __post_init__(self):
        vals = (self.spacing, self.follower_speed, self.leader_speed, self.delta_v, self.fluctuation_phase)
        if not all(math.isfinite(v) for v in vals):
            raise ForestError(f"non-finite feature in {self}")
        if self.gap_code not in (0, 1, 2, 3):
            raise ForestError(f"gap_code {self.gap_code} outside 0..3")

    def vector(self, schema: Sequence[str] = FEATURES) -> np.ndarray:
        return np.array([float(getattr(self, name)) for name in schema])


@dataclass(frozen=True)
class FeatureTable:
    """Design matrix with aligned targets; ``time`` keeps the source timestamps."""

    X: np.ndarray
    y: np.ndarray
    schema: tuple
    time: np.ndarray
    target: str

    def __len__(self):
        return len(self.y)

    def rows(self) -> list[FeatureRow]:
        out = []
        for x in self.X:
            d = dict(zip(self.schema, x))
            d.setdefault("spacing", 0.0)
            d["gap_code"] = int(d["gap_code"])
            out.append(FeatureRow(**d))
        return out

    def take(self, idx) -> "FeatureTable":
        return FeatureTable(self.X[idx], self.y[idx], self.schema, self.time[idx], self.target)


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_leaf: int = 2
    features_per_split: Optional[int] = None
    bootstrap: bool = True
    seed: int = 42

    def __post_init__(self):
        if self.n_trees < 1:
            raise ForestError(f"n_trees must be positive, got {self.n_trees}")
        if self.max_depth < 0:
            raise ForestError(f"max_depth must be non-negative, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ForestError(f"min_samples_leaf must be at least 1, got {self.min_samples_leaf}")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ForestError(f"features_per_split must be at least 1, got {self.features_per_split}")

    def resolved_features(self, p: int) -> int:
        k = self.features_per_split or max(1, math.ceil(p / 3))
        return min(k, p)


@dataclass(frozen=True)
class Metrics:
    rmse: float
    r2: Optional[float]

    @property
    def r2_defined(self) -> bool:
        return self.r2 is not None


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _predict_tree(self.feature, self.threshold, self.left, self.right, self.value, X)

    def structure(self) -> tuple:
        return (tuple(self.feature), tuple(self.threshold), tuple(self.left), tuple(self.right))

    def to_json(self) -> dict:
        return {
            "feature": [int(v) for v in self.feature],
            "threshold": [float(v) for v in self.threshold],
            "left": [int(v) for v in self.left],
            "right": [int(v) for v in self.right],
            "value": [float(v) for v in self.value],
            "gain": [float(v) for v in self.gain],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Tree":
        return cls(
            feature=np.array(d["feature"], dtype=np.int64),
            threshold=np.array(d["threshold"], dtype=float),
            left=np.array(d["left"], dtype=np.int64),
            right=np.array(d["right"], dtype=np.int64),
            value=np.array(d["value"], dtype=float),
            gain=np.array(d["gain"], dtype=float),
        )


@dataclass
class ForestModel:
    trees: list
    config: ForestConfig
    feature_schema: tuple
    target: str = ""
    train_metrics: Optional[Metrics] = None
    test_metrics: Optional[Metrics] = None
    extra: dict = field(default_factory=dict)

    def predict_matrix(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_schema):
            raise ForestError(
                f"expected {len(self.feature_schema)} features {self.feature_schema}, got shape {X.shape}"
            )
        acc = np.zeros(X.shape[0])
        for t in self.trees:
            acc += t.predict(X)
        return acc / len(self.trees)

    def feature_importances(self) -> dict:
        """Total squared-error reduction per feature, normalised to sum to one."""
        tot = np.zeros(len(self.feature_schema))
        for t in self.trees:
            internal = t.feature >= 0
            np.add.at(tot, t.feature[internal], t.gain[internal])
        s = tot.sum()
        if s > 0:
            tot = tot / s
        return {name: float(v) for name, v in zip(self.feature_schema, tot)}

    def to_json(self) -> dict:
        def m(x):
            return None if x is None else asdict(x)

        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "target": self.target,
            "schema": list(self.feature_schema),
            "config": asdict(self.config),
            "train_metrics": m(self.train_metrics),
            "test_metrics": m(self.test_metrics),
            "extra": self.extra,
            "trees": [t.to_json() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":")) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def loads(cls, text: str) -> "ForestModel":
        d = json.loads(text)
        if d.get("format") != MODEL_FORMAT:
            raise ForestError(f"not a forest model file (format={d.get('format')!r})")
        if d.get("version") != MODEL_VERSION:
            raise ForestError(f"unsupported model version {d.get('version')}")

        def m(x):
            return None if x is None else Metrics(**x)

        return cls(
            trees=[Tree.from_json(t) for t in d["trees"]],
            config=ForestConfig(**d["config"]),
            feature_schema=tuple(d["schema"]),
            target=d.get("target", ""),
            train_metrics=m(d.get("train_metrics")),
            test_metrics=m(d.get("test_metrics")),
            extra=d.get("extra", {}),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ForestModel":
        return cls.loads(Path(path).read_text())


# --------------------------------------------------------------------------- tree kernels


@numba.njit(cache=True, nogil=True)
def _best_threshold(X, work, lo, hi, f, yc, min_leaf, tie):
    """Best (found, threshold, score) for feature ``f`` over ``work[lo:hi]``.

    Scores within ``tie`` of the incumbent count as equal, so ties keep the
    lowest threshold.
    """
    m = hi - lo
    xs = X[work[lo:hi], f]
    order = np.argsort(xs, kind="mergesort")
    xo = xs[order]
    yo = yc[order]
    tot = np.sum(yo)
    totq = np.sum(yo * yo)
    sl = 0.0
    ql = 0.0
    found = False
    best = np.inf
    best_t = 0.0
    for i in range(m - 1):
        sl += yo[i]
        ql += yo[i] * yo[i]
        nl = i + 1
        nr = m - nl
        if xo[i] == xo[i + 1] or nl < min_leaf or nr < min_leaf:
            continue
        sr = tot - sl
        score = (ql - sl * sl / nl) + ((totq - ql) - sr * sr / nr)
        if not found or score < best - tie:
            found = True
            best = score
            t = 0.5 * (xo[i] + xo[i + 1])
            if t >= xo[i + 1]:
                t = xo[i]
            best_t = t
    return found, best_t, best


@numba.njit(cache=True, nogil=True)
def _grow(X, y, sample, max_depth, min_leaf, k_features, seed):
    np.random.seed(seed)
    p = X.shape[1]
    n = sample.shape[0]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)

    work = sample.copy()
    buf = np.empty(n, dtype=np.int64)
    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0], st_lo[0], st_hi[0], st_depth[0] = 0, 0, n, 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node, lo, hi, depth = st_node[top], st_lo[top], st_hi[top], st_depth[top]
        m = hi - lo
        ys = y[work[lo:hi]]
        ymin, ymax = ys.min(), ys.max()
        if ymin == ymax:
            value[node] = ys[0]
            continue
        mean = ys.mean()
        value[node] = mean
        if depth >= max_depth or m < 2 * min_leaf:
            continue
        yc = ys - mean
        parent_sse = np.sum(yc * yc)
        tie = 1e-12 * parent_sse

        perm = np.random.permutation(p)
        best_score = np.inf
        best_f = -1
        best_t = 0.0
        # draw features in batches of k; a batch with no valid split (e.g. all
        # constant columns) falls through to the next one
        for b0 in range(0, p, k_features):
            if best_f >= 0:
                break
            for f in np.sort(perm[b0:b0 + k_features]):
                lf, lt, ls = _best_threshold(X, work, lo, hi, f, yc, min_leaf, tie)
                if lf and (best_f < 0 or ls < best_score - tie):
                    best_score = ls
                    best_f = f
                    best_t = lt
        if best_f < 0:
            continue

        # stable partition of work[lo:hi] on the chosen split
        nl = 0
        for i in range(lo, hi):
            if X[work[i], best_f] <= best_t:
                buf[nl] = work[i]
                nl += 1
        j = nl
        for i in range(lo, hi):
            if X[work[i], best_f] > best_t:
                buf[j] = work[i]
                j += 1
        work[lo:hi] = buf[:m]

        feature[node] = best_f
        threshold[node] = best_t
        gain[node] = max(parent_sse - best_score, 0.0)
        lc, rc = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = lc, rc
        # right pushed first so the left subtree is expanded first
        st_node[top], st_lo[top], st_hi[top], st_depth[top] = rc, lo + nl, hi, depth + 1
        top += 1
        st_node[top], st_lo[top], st_hi[top], st_depth[top] = lc, lo, lo + nl, depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), gain[:n_nodes].copy())


@numba.njit(cache=True, nogil=True)
def _predict_tree(feature, threshold, left, right, value, X):
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out


# --------------------------------------------------------------------------- features and targets


def target_acceleration(ds: TrajectoryDataset, smooth_window: int = 1) -> np.ndarray:
    """Backward-difference follower acceleration, one value per sample after the first.

    ``smooth_window`` > 1 applies a centred moving average (odd widths only).
    """
    if not ds.dt > 0:
        raise ForestError(f"dt must be positive, got {ds.dt}")
    v = np.asarray(ds.follower_speed, dtype=float)
    a = (v[1:] - v[:-1]) / ds.dt
    if smooth_window > 1:
        if smooth_window % 2 == 0:
            raise ForestError(f"smoothing window must be odd, got {smooth_window}")
        a = uniform_filter1d(a, smooth_window, mode="nearest")
    return a


def fluctuation_phase(ds: TrajectoryDataset) -> np.ndarray:
    """Seconds since the most recent leader deceleration onset; 0 before the first.

    An onset is the first sample of a run where the leader decelerates harder
    than 0.3 m/s^2 for at least one second.
    """
    vl = np.asarray(ds.leader_speed, dtype=float)
    acc = np.empty_like(vl)
    acc[0] = 0.0
    acc[1:] = np.diff(vl) / ds.dt
    braking = acc < ONSET_DECEL
    need = max(1, int(round(ONSET_SUSTAIN_S / ds.dt)))
    phase = np.zeros(len(vl))
    onset_t = None
    i = 0
    n = len(vl)
    onsets = []
    while i < n:
        if braking[i]:
            j = i
            while j < n and braking[j]:
                j += 1
            if j - i >= need:
                onsets.append(i)
            i = j
        else:
            i += 1
    k = 0
    for i in range(n):
        while k < len(onsets) and onsets[k] <= i:
            onset_t = ds.time[onsets[k]]
            k += 1
        if onset_t is not None:
            phase[i] = ds.time[i] - onset_t
    return phase


def build_features(ds: TrajectoryDataset, target: str = "accel", smooth_window: int = 1) -> FeatureTable:
    """Feature matrix and targets for the acceleration or spacing model.

    The acceleration table drops the first sample (the difference needs one
    lag). The spacing table keeps every sample and leaves spacing out of the
    features.
    """
    vl = np.asarray(ds.leader_speed, dtype=float)
    vf = np.asarray(ds.follower_speed, dtype=float)
    cols = {
        "spacing": np.asarray(ds.spacing, dtype=float),
        "follower_speed": vf,
        "leader_speed": vl,
        "delta_v": vl - vf,
        "gap_code": np.full(len(vl), float(ds.gap.code)),
        "fluctuation_phase": fluctuation_phase(ds),
    }
    if target == "accel":
        schema = ACCEL_FEATURES
        X = np.column_stack([cols[c] for c in schema])[1:]
        y = target_acceleration(ds, smooth_window)
        time = np.asarray(ds.time)[1:]
    elif target == "spacing":
        schema = SPACING_FEATURES
        X = np.column_stack([cols[c] for c in schema])
        y = cols["spacing"].copy()
        time = np.asarray(ds.time).copy()
    else:
        raise ForestError(f"unknown target {target!r}; expected accel or spacing")
    return FeatureTable(np.ascontiguousarray(X), y, tuple(schema), time, target)


def concat_tables(tables: Sequence[FeatureTable]) -> FeatureTable:
    if not tables:
        raise ForestError("no feature tables to concatenate")
    schema = tables[0].schema
    if any(t.schema != schema for t in tables):
        raise ForestError("feature schemas differ")
    return FeatureTable(
        np.vstack([t.X for t in tables]),
        np.concatenate([t.y for t in tables]),
        schema,
        np.concatenate([t.time for t in tables]),
        tables[0].target,
    )


def chronological_split(rows, targets, fraction: float = 0.8):
    """First ``floor(fraction * N)`` rows train, the rest test, order kept."""
    if not 0 < fraction < 1:
        raise ForestError(f"split fraction must lie in (0, 1), got {fraction}")
    n = len(targets)
    if len(rows) != n:
        raise ForestError(f"{len(rows)} rows but {n} targets")
    k = int(math.floor(fraction * n))
    return (rows[:k], targets[:k]), (rows[k:], targets[k:])


def random_split(rows, targets, fraction: float = 0.8, seed: int = 42):
    """Shuffled split; order inside each half follows the original order."""
    if not 0 < fraction < 1:
        raise ForestError(f"split fraction must lie in (0, 1), got {fraction}")
    n = len(targets)
    k = int(math.floor(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    tr, te = np.sort(perm[:k]), np.sort(perm[k:])
    rows = np.asarray(rows)
    targets = np.asarray(targets)
    return (rows[tr], targets[tr]), (rows[te], targets[te])


# --------------------------------------------------------------------------- training


def _as_matrix(rows, schema) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        return np.ascontiguousarray(rows, dtype=float)
    rows = list(rows)
    if rows and isinstance(rows[0], FeatureRow):
        return np.array([r.vector(schema) for r in rows])
    return np.ascontiguousarray(np.array(rows, dtype=float).reshape(len(rows), -1))


def _grow_one(X, y, cfg: ForestConfig, k: int, tree_index: int) -> Tree:
    seed = cfg.seed + tree_index
    n = len(y)
    if cfg.bootstrap:
        sample = np.random.default_rng(seed).integers(0, n, n).astype(np.int64)
    else:
        sample = np.arange(n, dtype=np.int64)
    arrays = _grow(X, y, sample, cfg.max_depth, cfg.min_samples_leaf, k, seed)
    return Tree(*arrays)


def fit(rows, targets, cfg: Optional[ForestConfig] = None, schema: Sequence[str] = FEATURES,
        target: str = "", jobs: int = 1) -> ForestModel:
    """Grow ``cfg.n_trees`` trees; tree ``i`` uses seed ``cfg.seed + i``."""
    cfg = cfg or ForestConfig()
    schema = tuple(schema)
    X = _as_matrix(rows, schema)
    y = np.ascontiguousarray(targets, dtype=float)
    if len(y) == 0:
        raise ForestError("cannot fit a forest on empty data")
    if X.shape[0] != len(y):
        raise ForestError(f"{X.shape[0]} rows but {len(y)} targets")
    if len(y) < 2:
        raise ForestError("need at least 2 training rows")
    if X.shape[1] != len(schema):
        raise ForestError(f"matrix has {X.shape[1]} columns but schema has {len(schema)}")
    if not np.all(np.isfinite(y)):
        raise ForestError("non-finite targets")
    if not np.all(np.isfinite(X)):
        raise ForestError("non-finite features")
    k = cfg.resolved_features(X.shape[1])
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(lambda i: _grow_one(X, y, cfg, k, i), range(cfg.n_trees)))
    else:
        trees = [_grow_one(X, y, cfg, k, i) for i in range(cfg.n_trees)]
    model = ForestModel(trees=trees, config=cfg, feature_schema=schema, target=target)
    model.train_metrics = evaluate(model, X, y)
    return model


def predict(m: ForestModel, row: Union[FeatureRow, Sequence[float]]) -> float:
    if isinstance(row, FeatureRow):
        x = row.vector(m.feature_schema)
    else:
        x = np.asarray(row, dtype=float)
    if x.shape != (len(m.feature_schema),):
        raise ForestError(f"row has {x.size} values, schema expects {len(m.feature_schema)}")
    return float(m.predict_matrix(x[None, :])[0])


def regression_metrics(y, y_hat) -> Metrics:
    """RMSE and R^2; R^2 is None when the targets have zero variance."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ForestError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ForestError("no rows to evaluate")
    resid = y - y_hat
    sse = float(np.sum(resid ** 2))
    rmse = math.sqrt(sse / y.size)
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = None if sst == 0.0 else 1.0 - sse / sst
    return Metrics(rmse=rmse, r2=r2)


def evaluate(m: ForestModel, rows, targets) -> Metrics:
    X = _as_matrix(rows, m.feature_schema)
    return regression_metrics(targets, m.predict_matrix(X))


def train_and_evaluate(table: FeatureTable, cfg: Optional[ForestConfig] = None, fraction: float = 0.8,
                       split: str = "chronological", jobs: int = 1):
    """Split, fit on the first part and score on the rest.

    Returns ``(model, train_table, test_table)``; metrics live on the model.
    """
    cfg = cfg or ForestConfig()
    n = len(table)
    if split == "chronological":
        k = int(math.floor(fraction * n))
        if not 0 < fraction < 1:
            raise ForestError(f"split fraction must lie in (0, 1), got {fraction}")
        train, test = table.take(slice(0, k)), table.take(slice(k, n))
    elif split == "random":
        if not 0 < fraction < 1:
            raise ForestError(f"split fraction must lie in (0, 1), got {fraction}")
        perm = np.random.default_rng(cfg.seed).permutation(n)
        k = int(math.floor(fraction * n))
        train, test = table.take(np.sort(perm[:k])), table.take(np.sort(perm[k:]))
    else:
        raise ForestError(f"unknown split mode {split!r}")
    model = fit(train.X, train.y, cfg, schema=table.schema, target=table.target, jobs=jobs)
    model.test_metrics = evaluate(model, test.X, test.y)
    model.extra = {"split": split, "fraction": fraction, "n_train": len(train), "n_test": len(test)}
    return model, train, test
