import pytest

from streamwsl.harness import WorldConfig, generate_world
from streamwsl.pipeline import supervised_phase


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldConfig(n_labeled=200, n_unlabeled=150, n_test=100, seed=11))


@pytest.fixture(scope="session")
def shifted_world():
    return generate_world(WorldConfig(n_labeled=200, n_unlabeled=150, n_test=100, seed=11,
                                      shift_magnitude=24.0, run_length=5))


@pytest.fixture(scope="session")
def seed_model(small_world):
    return supervised_phase(small_world.source, small_world.config.num_classes)


@pytest.fixture(scope="session")
def shifted_seed_model(shifted_world):
    return supervised_phase(shifted_world.source, shifted_world.config.num_classes)
