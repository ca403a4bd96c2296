import numpy as np
import pytest

from obs_impact.config import ScenarioConfig
from obs_impact.pipeline import build_twin


def small_scenario(**kw):
    """q=10 scenario with a short window; correlation length scaled with
    the grid so the fields keep the same relative smoothness."""
    defaults = dict(
        q=10,
        n_steps_window=20,
        obs_every=10,
        n_steps_verify=30,
        corr_length=1.25,
        obs_stride=2,
    )
    defaults.update(kw)
    return ScenarioConfig(**defaults)


@pytest.fixture(scope="session")
def small_cfg():
    return small_scenario()


@pytest.fixture(scope="session")
def small_twin(small_cfg):
    return build_twin(small_cfg)


@pytest.fixture(scope="session")
def small_reanalysis(small_twin):
    report = small_twin.problem.minimize(max_iters=250)
    return small_twin, report


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
