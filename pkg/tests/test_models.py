import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evfollow.models import (
    CaccParams,
    FollowerState,
    IdmParams,
    ModelError,
    OvmParams,
    OvrvParams,
    SingularSpacingError,
    cacc_accel,
    equilibrium_spacing,
    idm_accel,
    make_params,
    model_accel,
    optimal_velocity,
    ovm_accel,
    ovrv_accel,
    params_from_json,
)

IDM_MEDIUM = IdmParams(22.12, 1.29, 1.73, 2.00, 2.00)
OVM_LONG = OvmParams(21.69, 1.49, 10.63)
OVRV_MEDIUM = OvrvParams(0.34, 0.39, 9.92, 0.99)
CACC_LONG = CaccParams(0.31, 0.28, 8.89, 1.44)
CACC_MEDIUM = CaccParams(0.10, 0.39, 4.96, 1.47)


class TestIdm:
    def test_standstill_equilibrium(self):
        p = IdmParams(30, 1.5, 2.0, 1.0, 1.5)
        assert idm_accel(p, FollowerState(0.0, 0.0, 2.0)) == 0.0

    def test_free_flow_limit(self):
        p = IdmParams(30, 1.5, 2.0, 1.0, 1.5)
        a = idm_accel(p, FollowerState(30.0, 30.0, 1e6))
        assert -1e-8 < a < 0

    def test_reference_params_direct_substitution(self):
        # high-precision evaluation of the closed form: s* = 1.73 + 1.29*20 = 27.53
        a = idm_accel(IDM_MEDIUM, FollowerState(20.0, 20.0, 30.0))
        assert a == pytest.approx(-1.0208489389442178, rel=1e-12)

    def test_desired_gap_floor(self):
        # strongly opening gap: dynamic term negative, s* floors at s0
        p = IdmParams(30, 1.0, 2.0, 1.0, 1.0)
        st_ = FollowerState(5.0, 30.0, 10.0)
        expected = 1.0 * (1 - (5 / 30) ** 4 - (2.0 / 10.0) ** 2)
        assert idm_accel(p, st_) == pytest.approx(expected, rel=1e-14)

    def test_singular_spacing(self):
        with pytest.raises(SingularSpacingError):
            idm_accel(IDM_MEDIUM, FollowerState(10.0, 10.0, 0.0))

    def test_scale_sanity(self):
        p = IDM_MEDIUM
        a = idm_accel(p, FollowerState(p.v0 / 2, p.v0 / 2, 1e4))
        assert 0 < a < p.a_max

    def test_delta_is_configurable(self):
        p = IdmParams(20, 1.0, 2.0, 1.0, 1.0, delta=1.0)
        assert idm_accel(p, FollowerState(10.0, 10.0, 1e9)) == pytest.approx(0.5, rel=1e-9)


class TestOvm:
    def test_zero_at_twice_scale(self):
        assert ovm_accel(OVM_LONG, FollowerState(0.0, 5.0, 2 * OVM_LONG.s_st)) == 0.0

    def test_saturation(self):
        assert ovm_accel(OVM_LONG, FollowerState(OVM_LONG.v_max, 0.0, 1e6)) == pytest.approx(0.0, abs=1e-12)

    def test_reference_params(self):
        a = ovm_accel(OVM_LONG, FollowerState(10.0, 3.0, 40.0))
        assert a == pytest.approx(15.570471552376729, rel=1e-12)
        assert a == pytest.approx(1.49 * (21.69 * math.tanh(40 / 10.63 - 2) - 10), rel=1e-14)


class TestOvrv:
    def test_equilibrium_manifold(self):
        p = OVRV_MEDIUM
        v = 12.0
        assert ovrv_accel(p, FollowerState(v, v, p.eta + p.tau * v)) == pytest.approx(0.0, abs=1e-12)

    def test_k2_zero_is_pure_spacing_feedback(self):
        p = OvrvParams(0.5, 0.0, 2.0, 3.0)
        assert ovrv_accel(p, FollowerState(4.0, 9.0, 20.0)) == 0.5 * (20 - 3 - 8)

    def test_reference_params(self):
        a = ovrv_accel(OVRV_MEDIUM, FollowerState(5.0, 6.0, 60.0))
        assert a == pytest.approx(3.5894, rel=1e-12)


class TestCacc:
    def test_equilibrium(self):
        assert cacc_accel(CACC_LONG, FollowerState(20.0, 20.0, 8.89 + 1.44 * 20)) == pytest.approx(0.0, abs=1e-12)

    def test_speed_term_only(self):
        p = CACC_LONG
        v = 15.0
        assert cacc_accel(p, FollowerState(v, v + 1, p.s0 + p.T * v)) == pytest.approx(p.k1, abs=1e-12)

    def test_reference_params(self):
        assert cacc_accel(CACC_MEDIUM, FollowerState(15.0, 14.0, 30.0)) == pytest.approx(1.0661, rel=1e-12)


class TestParams:
    @pytest.mark.parametrize("cls,bad", [
        (IdmParams, (0, 1, 1, 1, 1)),
        (OvmParams, (1, -1, 1)),
        (OvrvParams, (0, 0, 0, 0)),
        (CaccParams, (0, 0, 1, 1)),
    ])
    def test_invariants(self, cls, bad):
        with pytest.raises(ModelError):
            cls(*bad)

    def test_json_order(self):
        assert IDM_MEDIUM.to_json() == {"model": "idm", "params": [22.12, 1.29, 1.73, 2.0, 2.0]}
        assert OVRV_MEDIUM.to_json()["params"] == [0.34, 0.39, 9.92, 0.99]
        assert OVM_LONG.to_json()["params"] == [21.69, 1.49, 10.63]
        assert CACC_LONG.to_json()["params"] == [0.31, 0.28, 8.89, 1.44]
        for p in (IDM_MEDIUM, OVRV_MEDIUM, OVM_LONG, CACC_LONG):
            assert params_from_json(p.to_json()) == p

    def test_unknown_kind(self):
        with pytest.raises(ModelError):
            make_params("gipps", [1, 2])

    def test_bad_state(self):
        with pytest.raises(ModelError):
            FollowerState(-1.0, 0.0, 5.0)


pos = st.floats(0.05, 5.0)
speed = st.floats(0.0, 35.0)


class TestProperties:
    @given(pos, pos, st.floats(0.0, 10.0), pos, speed)
    def test_cacc_equilibrium_zero(self, k1, k2, s0, T, v):
        p = CaccParams(k1, k2, s0, T)
        assert abs(cacc_accel(p, FollowerState(v, v, equilibrium_spacing(p, v)))) < 1e-12 * max(1, s0 + T * v) * k2 + 1e-12

    @given(st.floats(10, 40), pos, st.floats(1, 30), st.floats(0, 0.95))
    def test_ovm_equilibrium_zero(self, vmax, alpha, sst, frac):
        p = OvmParams(vmax, alpha, sst)
        v = frac * vmax
        s = equilibrium_spacing(p, v)
        assert optimal_velocity(p, s) == pytest.approx(v, abs=1e-9)

    @pytest.mark.parametrize("p", [CACC_LONG, OVRV_MEDIUM, OVM_LONG, IDM_MEDIUM])
    def test_monotone_in_spacing(self, p):
        for v in (0.0, 5.0, 15.0, 25.0):
            for vl in (v, v + 2.0):
                s = np.linspace(0.5, 120.0, 400)
                a = [model_accel(p, FollowerState(v, vl, x)) for x in s]
                assert np.all(np.diff(a) > 0), (p, v, vl)

    @pytest.mark.parametrize("p", [CACC_LONG, OVRV_MEDIUM])
    def test_affine_superposition(self, p):
        rng = np.random.default_rng(3)
        for _ in range(200):
            x1, x2 = rng.uniform([0, 0, 1], [30, 30, 80], (2, 3))
            lam = rng.uniform()
            xm = lam * x1 + (1 - lam) * x2
            f = lambda x: model_accel(p, FollowerState(*x))
            assert f(xm) == pytest.approx(lam * f(x1) + (1 - lam) * f(x2), abs=1e-12 * 100)
