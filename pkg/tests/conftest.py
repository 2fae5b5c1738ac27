"""Shared test fixtures for virm-sim tests."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from virm_sim.calibration import clear_calibration_cache
from virm_sim.client import LocalVirmClient
from virm_sim.clock import VirtualClock
from virm_sim.engine import SimulatedEngine
from virm_sim.service import VirmService
from virm_sim.share_cache import ShareSampler
from virm_sim.types import DomainConfig, HeartbeatPolicy, JobSpec, MachineSpec, PerfParams


@pytest.fixture(autouse=True)
def reset_caches():
    """Reset the share sampler singleton and calibration memo between tests."""
    ShareSampler._instance = None
    clear_calibration_cache()
    yield
    ShareSampler._instance = None
    clear_calibration_cache()


@pytest.fixture
def machine() -> MachineSpec:
    return MachineSpec()


@pytest.fixture
def params() -> PerfParams:
    return PerfParams()


@pytest.fixture
def small_job() -> JobSpec:
    """A job that runs a few minutes inside a 2-vCPU sandbox."""
    return JobSpec(
        cpu_work=600.0,
        event_count=100,
        mem_base=1024.0,
        input_size=0.5,
        output_size=0.25,
        job_id="small-1",
    )


@pytest.fixture
def domain() -> DomainConfig:
    return DomainConfig("dom1", vcpus=2, memory=2048)


@pytest.fixture
def clock() -> VirtualClock:
    return VirtualClock()


@pytest.fixture
def service(machine, params, clock) -> VirmService:
    """In-process VIRM service sharing the test clock."""
    engine = SimulatedEngine(machine, params, clock)
    return VirmService(machine, params, HeartbeatPolicy(), clock=clock, engine=engine)


@pytest.fixture
def local_client(service) -> LocalVirmClient:
    return LocalVirmClient(service)


@pytest.fixture
def write_scenario(tmp_path: Path):
    """Factory writing a scenario dict to a JSON file and returning its path."""

    def _write(data: dict, name: str = "scenario.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def conf9_dict() -> dict:
    """Three symmetric 1-vCPU domains, each with a short reference-like job."""
    return {
        "conf_id": "Conf_9",
        "machine": {"pcpus": 4, "total_memory": 8192, "dom0_memory": 2048},
        "domains": [
            {"domain_id": f"dom{i}", "vcpus": 1, "memory": 2048} for i in (1, 2, 3)
        ],
        "jobs": [
            {"cpu_work": 900, "event_count": 100, "input_size": 1, "output_size": 0.5,
             "job_id": f"job{i}"}
            for i in (1, 2, 3)
        ],
        "baseline_s": 300,
    }
