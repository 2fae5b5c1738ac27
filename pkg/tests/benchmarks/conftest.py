"""Benchmark fixtures for virm-sim performance testing.

Provides session-scoped fitted parameters and named-configuration scenarios so
that benchmarks time only the operation under test.
"""

from __future__ import annotations

import platform

import pytest

from virm_sim.calibration import calibrate, clear_calibration_cache
from virm_sim.reference_data import conf_scenario
from virm_sim.share_cache import ShareSampler
from virm_sim.types import PerfParams, Scenario


@pytest.fixture(scope="session")
def hardware_profile() -> str:
    """Machine label pytest-benchmark groups results by."""
    return f"{platform.machine()}-{platform.python_implementation()}"


@pytest.fixture(scope="session")
def fitted_params() -> PerfParams:
    """Calibrate once per session."""
    params = calibrate().params
    clear_calibration_cache()
    return params


@pytest.fixture(scope="session")
def conf9_scenario(fitted_params) -> Scenario:
    return conf_scenario("Conf_9", fitted_params)


@pytest.fixture
def cold_sampler():
    """Fresh share sampler so every round re-runs the scheduler."""
    ShareSampler._instance = None
    yield
    ShareSampler._instance = None
