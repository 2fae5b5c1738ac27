"""Thread-safe cache of steady-state CPU shares per running-domain set.

The simulated engine asks for shares every time the set of running domains
changes. Running the credit scheduler for a few simulated seconds is cheap but
not free, and replays revisit the same sets many times, so results are kept in
an LRU cache keyed by the host and the domain configurations.

Environment Variables:
    VIRM_SHARE_CACHE_SIZE: Override the default cache size (default: 256)
"""

from __future__ import annotations

import logging
import os
import threading
from collections.abc import Iterable

from cachetools import LRUCache

from .scheduler import steady_state_shares
from .types import DomainConfig, MachineSpec

logger = logging.getLogger(__name__)

_ShareKey = tuple[MachineSpec, tuple[DomainConfig, ...]]


class ShareSampler:
    """Singleton LRU cache over :func:`steady_state_shares`.

    Example:
        >>> sampler = ShareSampler.get_instance()
        >>> shares = sampler.shares(MachineSpec(), [DomainConfig("a", vcpus=2)])
        >>> shares["a"]
        2.0
    """

    _instance: ShareSampler | None = None
    _lock: threading.Lock = threading.Lock()

    def __init__(self, maxsize: int = 256, warmup: float = 0.3, window: float = 3.0) -> None:
        self._cache: LRUCache[_ShareKey, dict[str, float]] = LRUCache(maxsize=maxsize)
        self._cache_lock = threading.Lock()
        self._warmup = warmup
        self._window = window
        self.hits = 0
        self.misses = 0
        logger.debug("ShareSampler initialized with maxsize=%d", maxsize)

    @classmethod
    def get_instance(cls, maxsize: int = 256) -> ShareSampler:
        """Get or create the process-wide sampler.

        Args:
            maxsize: Only used on first call. Can be overridden by
                VIRM_SHARE_CACHE_SIZE.
        """
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    env_size = os.environ.get("VIRM_SHARE_CACHE_SIZE")
                    if env_size is not None:
                        try:
                            maxsize = int(env_size)
                            logger.info(
                                "Using share cache size from VIRM_SHARE_CACHE_SIZE: %d", maxsize
                            )
                        except ValueError:
                            logger.warning(
                                "Invalid VIRM_SHARE_CACHE_SIZE value '%s', using default", env_size
                            )
                    cls._instance = cls(maxsize)
        return cls._instance

    def shares(self, machine: MachineSpec, domains: Iterable[DomainConfig]) -> dict[str, float]:
        """CPUs each CPU-bound domain receives once the scheduler has settled."""
        key: _ShareKey = (machine, tuple(sorted(domains, key=lambda d: d.domain_id)))
        if not key[1]:
            return {}

        with self._cache_lock:
            cached = self._cache.get(key)
            if cached is not None:
                self.hits += 1
                return dict(cached)

        # Sample outside the lock; a concurrent miss on the same key computes the
        # same deterministic value.
        report = steady_state_shares(machine, key[1], warmup=self._warmup, window=self._window)

        with self._cache_lock:
            self.misses += 1
            self._cache[key] = report
            logger.debug("Sampled shares for %d domains: %s", len(key[1]), report)
        return dict(report)

    def clear(self) -> None:
        with self._cache_lock:
            self._cache.clear()
            self.hits = 0
            self.misses = 0

    def __len__(self) -> int:
        with self._cache_lock:
            return len(self._cache)
