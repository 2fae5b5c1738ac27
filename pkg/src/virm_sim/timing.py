"""Wall-clock timing for replays and benchmarks.

Simulated durations live on the virtual clock; this measures how long the host
took to compute them.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Generator
from contextlib import contextmanager

logger = logging.getLogger(__name__)


@contextmanager
def timed(name: str) -> Generator[dict, None, None]:
    """Context manager measuring wall-clock time of its body.

    Yields a dict that holds {"name": str, "elapsed": float} after exit.

    Example:
        with timed("table1") as timing:
            replay_table1()
        print(f"{timing['name']} took {timing['elapsed']:.3f}s")
    """
    result: dict = {"name": name, "elapsed": 0.0}
    start = time.perf_counter()
    try:
        yield result
    finally:
        result["elapsed"] = time.perf_counter() - start
        logger.debug("%s took %.3f s", name, result["elapsed"])
