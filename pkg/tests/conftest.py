import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=400)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cfg():
    """A fleet small enough to build in about a second."""
    from hatsim import ExperimentConfig
    return ExperimentConfig().replace(**{
        "fleet.n_sources": 4, "fleet.samples_per_domain": 200, "fleet.source_epochs": 60,
        "training.epochs_target": 30, "training.epochs_mixer": 15, "selection.eta": 0.5,
    })


@pytest.fixture(scope="session")
def small_fleet(small_cfg):
    from hatsim.experiment import build_otse_fleet
    return build_otse_fleet(small_cfg, 3)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
