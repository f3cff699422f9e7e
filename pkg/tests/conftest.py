import numpy as np
import pytest

from evfollow.models import CaccParams, OvrvParams
from evfollow.simulator import synthesize_follower
from evfollow.trajectory import ScenarioSpec, TrajectoryDataset, synth_leader_profile

CACC_LONG = CaccParams(0.31, 0.28, 8.89, 1.44)
OVRV_MEDIUM = OvrvParams(0.34, 0.39, 9.92, 0.99)


def make_dataset(n=10, dt=0.04, gap="long", vl=20.0, vf=20.0, s=30.0, label="t"):
    return TrajectoryDataset(
        time=np.arange(n) * dt,
        leader_speed=np.full(n, vl),
        follower_speed=np.full(n, vf),
        spacing=np.full(n, s),
        dt=dt,
        gap=gap,
        label=label,
    )


@pytest.fixture
def leader_200s():
    spec = ScenarioSpec(repetitions=3, free_hold_s=20.0, duration_s=200.0)
    return synth_leader_profile(spec, seed=1)


@pytest.fixture
def cacc_200s(leader_200s):
    return synthesize_follower(leader_200s, CACC_LONG)
