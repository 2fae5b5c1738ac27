"""Virtual clock shared by the harness, the service and the simulated engine.

Time advances only when the owner steps it, so every run over the same inputs
sees the same timeline.
"""

from __future__ import annotations

import logging
import threading

logger = logging.getLogger(__name__)


class VirtualClock:
    """Monotonic virtual time in seconds."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> float:
        """Move forward by *seconds*; negative steps are rejected."""
        if seconds < 0:
            raise ValueError(f"virtual clock cannot run backward (advance {seconds})")
        with self._lock:
            self._now += seconds
            return self._now

    def advance_to(self, t: float) -> float:
        """Move forward to *t*. Targets in the past leave the clock where it is."""
        with self._lock:
            if t > self._now:
                self._now = float(t)
            return self._now
