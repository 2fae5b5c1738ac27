"""Simulation callback protocol and event types for pilot and replay reporting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable


@dataclass
class PhaseEvent:
    """Emitted when a pilot enters a lifecycle phase or logs within one.

    ``data`` carries a structured payload such as a transfer record.
    """

    pilot_id: str
    phase: str
    timestamp: float
    detail: str = ""
    data: dict = field(default_factory=dict)


@dataclass
class HeartbeatEvent:
    """Emitted for every heartbeat a pilot sends and the lease it got back."""

    pilot_id: str
    workspace_id: str
    timestamp: float
    expires_at: float


@dataclass
class ProgressEvent:
    """Emitted as replay configurations or scenario pilots complete."""

    label: str
    current: int
    total: int
    extra: dict = field(default_factory=dict)


@runtime_checkable
class SimulationCallback(Protocol):
    """Protocol for receiving simulation updates."""

    def on_phase(self, event: PhaseEvent) -> None: ...

    def on_heartbeat(self, event: HeartbeatEvent) -> None: ...

    def on_progress(self, event: ProgressEvent) -> None: ...


class LoggingCallback:
    """Callback implementation that logs events via the logging module."""

    def __init__(self, logger: logging.Logger | None = None) -> None:
        self._logger = logger or logging.getLogger("virm_sim")

    def on_phase(self, event: PhaseEvent) -> None:
        self._logger.info(
            "[t=%.1f] %s -> %s%s",
            event.timestamp,
            event.pilot_id,
            event.phase,
            f" ({event.detail})" if event.detail else "",
        )

    def on_heartbeat(self, event: HeartbeatEvent) -> None:
        self._logger.debug(
            "[t=%.1f] %s heartbeat on %s, lease until %.1f",
            event.timestamp,
            event.pilot_id,
            event.workspace_id,
            event.expires_at,
        )

    def on_progress(self, event: ProgressEvent) -> None:
        self._logger.info("%s: %d/%d", event.label, event.current, event.total)


class NullCallback:
    """No-op callback used as default when no callback is provided."""

    def on_phase(self, event: PhaseEvent) -> None:
        pass

    def on_heartbeat(self, event: HeartbeatEvent) -> None:
        pass

    def on_progress(self, event: ProgressEvent) -> None:
        pass
