"""Tests for wall-clock timing of replays."""

from __future__ import annotations

import logging

import pytest

from virm_sim.timing import timed


def test_timed_records_elapsed(caplog):
    with caplog.at_level(logging.DEBUG, logger="virm_sim.timing"):
        with timed("dom0") as timing:
            sum(range(1000))
    assert timing["name"] == "dom0"
    assert timing["elapsed"] > 0.0
    assert "dom0 took" in caplog.text


def test_timed_records_on_error():
    with pytest.raises(RuntimeError):
        with timed("broken") as timing:
            raise RuntimeError("boom")
    assert timing["elapsed"] > 0.0
