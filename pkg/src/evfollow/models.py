"""Classical car-following laws: IDM, OVM, OVRV and simplified CACC.

Each law has a parameter dataclass, a public ``*_accel`` function and a
numba-compiled scalar kernel that the simulator calls in its inner loop.
Parameter vectors (and their JSON form) use this order:

    IDM  (v0, T, s0, a_max, b)
    OVRV (k1, k2, tau, eta)
    OVM  (v_max, alpha, s_st)
    CACC (k1, k2, s0, T)
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import ClassVar, Union

import numba
import numpy as np

IDM, OVM, OVRV, CACC = 0, 1, 2, 3
MODEL_KINDS = ("idm", "ovm", "ovrv", "cacc")


class ModelError(ValueError):
    pass


class SingularSpacingError(ModelError):
    """IDM evaluated at non-positive spacing."""


@dataclass(frozen=True)
class FollowerState:
    v: float
    v_l: float
    s: float

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.v, self.v_l, self.s)):
            raise ModelError(f"non-finite follower state {self}")
        if self.v < 0 or self.v_l < 0:
            raise ModelError(f"negative speed in follower state {self}")


class _Params:
    kind: ClassVar[str]
    code: ClassVar[int]
    names: ClassVar[tuple[str, ...]]

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.names], dtype=float)

    @classmethod
    def from_vector(cls, x, **extra):
        x = [float(v) for v in x]
        if len(x) != len(cls.names):
            raise ModelError(f"{cls.kind} expects {len(cls.names)} parameters, got {len(x)}")
        return cls(*x, **extra)

    def kernel_vector(self) -> np.ndarray:
        return self.to_vector()

    def to_json(self) -> dict:
        return {"model": self.kind, "params": [float(v) for v in self.to_vector()]}

    def _check(self, rules):
        for name, ok, desc in rules:
            value = getattr(self, name)
            if not (math.isfinite(value) and ok(value)):
                raise ModelError(f"{self.kind} parameter {name}={value} must be {desc}")


@dataclass(frozen=True)
class IdmParams(_Params):
    v0: float
    T: float
    s0: float
    a_max: float
    b: float
    delta: float = 4.0

    kind: ClassVar[str] = "idm"
    code: ClassVar[int] = IDM
    names: ClassVar[tuple[str, ...]] = ("v0", "T", "s0", "a_max", "b")

    def __post_init__(self):
        pos = (lambda x: x > 0, "> 0")
        self._check([(n, *pos) for n in (*self.names, "delta")])

    def kernel_vector(self) -> np.ndarray:
        return np.array([self.v0, self.T, self.s0, self.a_max, self.b, self.delta])


@dataclass(frozen=True)
class OvmParams(_Params):
    v_max: float
    alpha: float
    s_st: float

    kind: ClassVar[str] = "ovm"
    code: ClassVar[int] = OVM
    names: ClassVar[tuple[str, ...]] = ("v_max", "alpha", "s_st")

    def __post_init__(self):
        self._check([(n, lambda x: x > 0, "> 0") for n in self.names])


@dataclass(frozen=True)
class OvrvParams(_Params):
    k1: float
    k2: float
    tau: float
    eta: float

    kind: ClassVar[str] = "ovrv"
    code: ClassVar[int] = OVRV
    names: ClassVar[tuple[str, ...]] = ("k1", "k2", "tau", "eta")

    def __post_init__(self):
        nonneg = (lambda x: x >= 0, ">= 0")
        self._check([("k1", lambda x: x > 0, "> 0"), ("k2", *nonneg), ("tau", *nonneg), ("eta", *nonneg)])


@dataclass(frozen=True)
class CaccParams(_Params):
    k1: float
    k2: float
    s0: float
    T: float

    kind: ClassVar[str] = "cacc"
    code: ClassVar[int] = CACC
    names: ClassVar[tuple[str, ...]] = ("k1", "k2", "s0", "T")

    def __post_init__(self):
        nonneg = (lambda x: x >= 0, ">= 0")
        self._check([("k1", *nonneg), ("k2", lambda x: x > 0, "> 0"), ("s0", *nonneg), ("T", lambda x: x > 0, "> 0")])


ModelParams = Union[IdmParams, OvmParams, OvrvParams, CaccParams]

PARAM_TYPES: dict[str, type] = {
    "idm": IdmParams,
    "ovm": OvmParams,
    "ovrv": OvrvParams,
    "cacc": CaccParams,
}


def params_class(kind: str) -> type:
    try:
        return PARAM_TYPES[kind.lower()]
    except (KeyError, AttributeError):
        raise ModelError(f"unknown model kind {kind!r}; expected one of {', '.join(MODEL_KINDS)}") from None


def make_params(kind: str, vector, **extra) -> ModelParams:
    return params_class(kind).from_vector(vector, **extra)


def params_from_json(obj: Union[str, dict]) -> ModelParams:
    if isinstance(obj, str):
        obj = json.loads(obj)
    extra = {}
    if "delta" in obj:
        extra["delta"] = float(obj["delta"])
    return make_params(obj["model"], obj["params"], **extra)


# --------------------------------------------------------------------------- kernels


@numba.njit(cache=True)
def _idm(v0, T, s0, a_max, b, delta, v, v_l, s):
    dv = v - v_l
    dyn = T * v + v * dv / (2.0 * math.sqrt(a_max * b))
    s_star = s0 + max(0.0, dyn)
    return a_max * (1.0 - (v / v0) ** delta - (s_star / s) ** 2)


@numba.njit(cache=True)
def _ovm(v_max, alpha, s_st, v, s):
    return alpha * (v_max * math.tanh(s / s_st - 2.0) - v)


@numba.njit(cache=True)
def _ovrv(k1, k2, tau, eta, v, v_l, s):
    return k1 * (s - eta - tau * v) + k2 * (v_l - v)


@numba.njit(cache=True)
def _cacc(k1, k2, s0, T, v, v_l, s):
    return k1 * (v_l - v) + k2 * (s - (s0 + T * v))


@numba.njit(cache=True)
def accel_kernel(code, p, v, v_l, s):
    """Dispatch on model code; ``p`` is the kernel parameter vector."""
    if code == IDM:
        return _idm(p[0], p[1], p[2], p[3], p[4], p[5], v, v_l, s)
    elif code == OVM:
        return _ovm(p[0], p[1], p[2], v, s)
    elif code == OVRV:
        return _ovrv(p[0], p[1], p[2], p[3], v, v_l, s)
    else:
        return _cacc(p[0], p[1], p[2], p[3], v, v_l, s)


# --------------------------------------------------------------------------- public laws


def idm_accel(p: IdmParams, st: FollowerState) -> float:
    """IDM acceleration; the desired gap never drops below ``s0``.

    Raises:
        SingularSpacingError: if ``st.s <= 0``.
    """
    if not st.s > 0:
        raise SingularSpacingError(f"IDM needs positive spacing, got s={st.s}")
    return float(_idm(p.v0, p.T, p.s0, p.a_max, p.b, p.delta, st.v, st.v_l, st.s))


def ovm_accel(p: OvmParams, st: FollowerState) -> float:
    return float(_ovm(p.v_max, p.alpha, p.s_st, st.v, st.s))


def ovrv_accel(p: OvrvParams, st: FollowerState) -> float:
    return float(_ovrv(p.k1, p.k2, p.tau, p.eta, st.v, st.v_l, st.s))


def cacc_accel(p: CaccParams, st: FollowerState) -> float:
    return float(_cacc(p.k1, p.k2, p.s0, p.T, st.v, st.v_l, st.s))


def model_accel(p: ModelParams, st: FollowerState) -> float:
    """Commanded acceleration for any parameter variant."""
    if isinstance(p, IdmParams):
        return idm_accel(p, st)
    if isinstance(p, OvmParams):
        return ovm_accel(p, st)
    if isinstance(p, OvrvParams):
        return ovrv_accel(p, st)
    if isinstance(p, CaccParams):
        return cacc_accel(p, st)
    raise ModelError(f"not a model parameter set: {p!r}")


def optimal_velocity(p: OvmParams, s: float) -> float:
    return p.v_max * math.tanh(s / p.s_st - 2.0)


def equilibrium_spacing(p: ModelParams, v: float) -> float:
    """Spacing at which a follower cruising at the leader's speed ``v`` holds still.

    IDM has a closed form only through its free-flow term, so it is solved for
    ``v < v0``; OVM inverts the tanh and needs ``|v| < v_max``.
    """
    if isinstance(p, CaccParams):
        return p.s0 + p.T * v
    if isinstance(p, OvrvParams):
        return p.eta + p.tau * v
    if isinstance(p, OvmParams):
        if not abs(v) < p.v_max:
            raise ModelError(f"OVM has no equilibrium at v={v} >= v_max={p.v_max}")
        return p.s_st * (2.0 + math.atanh(v / p.v_max))
    if isinstance(p, IdmParams):
        free = 1.0 - (v / p.v0) ** p.delta
        if not free > 0:
            raise ModelError(f"IDM has no equilibrium at v={v} >= v0={p.v0}")
        return (p.s0 + p.T * v) / math.sqrt(free)
    raise ModelError(f"not a model parameter set: {p!r}")


__all__ = [
    "FollowerState", "IdmParams", "OvmParams", "OvrvParams", "CaccParams", "ModelParams",
    "idm_accel", "ovm_accel", "ovrv_accel", "cacc_accel", "model_accel", "accel_kernel",
    "make_params", "params_class", "params_from_json", "equilibrium_spacing", "optimal_velocity",
    "MODEL_KINDS", "ModelError", "SingularSpacingError",
]
