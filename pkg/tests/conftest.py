import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def scaled_run(tmp_path_factory):
    """The scaled training run shared by the acceptance checks and slow unit tests."""
    from metapi.ppo import scaled_config, train

    out = tmp_path_factory.mktemp("scaled_main")
    result = train(scaled_config(), out)
    return result, out


@pytest.fixture(scope="session")
def scaled_agent(scaled_run):
    return scaled_run[0].agent


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
