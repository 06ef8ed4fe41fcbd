import numpy as np
import pytest
import torch

from railrl.env import RailEnv
from railrl.mapgen import MapConfig, generate_scenario
from railrl.scenario import MalfunctionParams

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_scenario():
    """16x10 map, 2 cities, 3 trains, no malfunctions."""
    return generate_scenario(MapConfig(width=16, height=10, n_cities=2, n_trains=3, seed=7))


@pytest.fixture(scope="session")
def small_malf_scenario():
    """Same footprint with a high malfunction rate to exercise breakdowns."""
    return generate_scenario(
        MapConfig(
            width=16,
            height=10,
            n_cities=2,
            n_trains=3,
            seed=7,
            malfunction=MalfunctionParams(rate=40.0, min_duration=2, max_duration=5),
        )
    )


@pytest.fixture(scope="session")
def medium_scenario():
    """30x30 map, 2 cities, 4 trains; the training-sized instance."""
    return generate_scenario(MapConfig(width=30, height=30, n_cities=2, n_trains=4, seed=3))


@pytest.fixture()
def small_env(small_scenario):
    return RailEnv(small_scenario, seed=1)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_rollout(env, rng, steps=None):
    """Step with uniform random actions until done or `steps`; returns infos."""
    infos = []
    n = env.n_trains
    budget = env.t_max if steps is None else steps
    for _ in range(budget):
        actions = rng.integers(0, 5, size=n).tolist()
        infos.append(env.step(actions))
        if env.done:
            break
    return infos
