"""Tests for callback protocol wiring into pilots and the harness."""

from __future__ import annotations

import logging
from unittest.mock import patch

import pytest

from virm_sim.callbacks import (
    HeartbeatEvent,
    LoggingCallback,
    NullCallback,
    PhaseEvent,
    ProgressEvent,
    SimulationCallback,
)
from virm_sim.harness import simulate
from virm_sim.scenario import scenario_from_dict


class CollectorCallback:
    """Test callback that collects all events."""

    def __init__(self):
        self.phase_events: list[PhaseEvent] = []
        self.heartbeat_events: list[HeartbeatEvent] = []
        self.progress_events: list[ProgressEvent] = []

    def on_phase(self, event: PhaseEvent) -> None:
        self.phase_events.append(event)

    def on_heartbeat(self, event: HeartbeatEvent) -> None:
        self.heartbeat_events.append(event)

    def on_progress(self, event: ProgressEvent) -> None:
        self.progress_events.append(event)


class TestProtocolCompliance:
    def test_logging_callback_satisfies_protocol(self):
        assert isinstance(LoggingCallback(), SimulationCallback)

    def test_null_callback_satisfies_protocol(self):
        assert isinstance(NullCallback(), SimulationCallback)

    def test_collector_callback_satisfies_protocol(self):
        assert isinstance(CollectorCallback(), SimulationCallback)


class TestCallbackWiring:
    def test_default_callback_is_logging(self):
        with patch("virm_sim.harness.LoggingCallback") as mock_cls:
            mock_cls.return_value = NullCallback()
            simulate(scenario_from_dict({"jobs": [{"cpu_work": 40}]}))
            mock_cls.assert_called_once()

    def test_events_fire_during_simulation(self, conf9_dict):
        collector = CollectorCallback()
        simulate(scenario_from_dict(conf9_dict), callback=collector)

        pilots = {e.pilot_id for e in collector.phase_events}
        assert pilots == {"pilot-1", "pilot-2", "pilot-3"}
        assert ("pilot-1", "done") in {(e.pilot_id, e.phase) for e in collector.phase_events}
        transfers = [e for e in collector.phase_events if e.data]
        assert len(transfers) == 6
        assert len(collector.heartbeat_events) == 93
        assert all(
            e.expires_at == pytest.approx(e.timestamp + 90.0) for e in collector.heartbeat_events
        )
        assert len(collector.progress_events) == 3


class TestLoggingCallback:
    def test_phase_line(self, caplog):
        cb = LoggingCallback(logging.getLogger("test.cb"))
        with caplog.at_level(logging.INFO, logger="test.cb"):
            cb.on_phase(PhaseEvent("pilot-1", "stage_in", 12.0, "input staged"))
        assert "[t=12.0] pilot-1 -> stage_in (input staged)" in caplog.text

    def test_heartbeat_is_debug(self, caplog):
        cb = LoggingCallback(logging.getLogger("test.cb"))
        with caplog.at_level(logging.INFO, logger="test.cb"):
            cb.on_heartbeat(HeartbeatEvent("pilot-1", "ws-0001", 30.0, 120.0))
        assert caplog.records == []
        with caplog.at_level(logging.DEBUG, logger="test.cb"):
            cb.on_heartbeat(HeartbeatEvent("pilot-1", "ws-0001", 30.0, 120.0))
        assert "lease until 120.0" in caplog.text

    def test_progress_line(self, caplog):
        cb = LoggingCallback(logging.getLogger("test.cb"))
        with caplog.at_level(logging.INFO, logger="test.cb"):
            cb.on_progress(ProgressEvent("table1", 2, 5))
        assert "table1: 2/5" in caplog.text
