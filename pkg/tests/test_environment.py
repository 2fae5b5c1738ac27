"""Tests for environment validation and startup diagnostics."""

from __future__ import annotations

import logging
import os
import socket

import pytest

from virm_sim.environment import (
    EnvironmentError,
    log_startup_diagnostics,
    port_available,
    validate_environment,
)


@pytest.fixture
def bound_port():
    """A loopback port held open for the duration of the test."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.bind(("127.0.0.1", 0))
    sock.listen(1)
    yield sock.getsockname()[1]
    sock.close()


def test_validate_environment_passes_with_nothing_to_check():
    validate_environment()


def test_free_port_passes():
    validate_environment(port=0)


def test_port_in_use(bound_port):
    assert not port_available("127.0.0.1", bound_port)
    with pytest.raises(EnvironmentError, match="already in use"):
        validate_environment(port=bound_port)


def test_port_out_of_range():
    with pytest.raises(EnvironmentError, match="outside 0-65535"):
        validate_environment(port=70000)


def test_missing_scenario_file(tmp_path):
    with pytest.raises(EnvironmentError, match="does not exist"):
        validate_environment(scenario_path=tmp_path / "nope.json")


def test_existing_scenario_file(tmp_path):
    path = tmp_path / "s.json"
    path.write_text("{}")
    validate_environment(scenario_path=path)


def test_unwritable_output_directory(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("x")
    with pytest.raises(EnvironmentError, match="not writable"):
        validate_environment(output_paths=[blocker / "out" / "metrics.csv"])


def test_all_problems_reported_together(tmp_path, bound_port):
    with pytest.raises(EnvironmentError) as exc_info:
        validate_environment(port=bound_port, scenario_path=tmp_path / "nope.json")
    assert len(exc_info.value.problems) == 2


def test_writable_output_leaves_no_probe_file(tmp_path):
    validate_environment(output_paths=[tmp_path / "out" / "metrics.csv"])
    assert os.listdir(tmp_path / "out") == []


def test_log_startup_diagnostics_no_crash(caplog):
    with caplog.at_level(logging.INFO):
        log_startup_diagnostics(port=18700, scenario="scenarios/conf_9.json")
    assert "port: 18700" in caplog.text
    assert "numpy version" in caplog.text


def test_environment_error_has_problems_list():
    err = EnvironmentError(["problem 1", "problem 2"])
    assert err.problems == ["problem 1", "problem 2"]
    assert "problem 1" in str(err)
