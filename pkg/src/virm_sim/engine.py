"""Deployment engine behind the VIRM service.

The engine owns disk volumes and guest domains. The simulated engine also
advances each booted payload through virtual time: progress is linear between
events, where an event is a payload finishing, a balloon grant, a new balloon
request or an out-of-memory kill. CPU capacity comes from credit-scheduler
shares of the domains currently busy, so it changes whenever a payload starts
or stops.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

from .clock import VirtualClock
from .exceptions import EngineError, PerfModelError
from .perf_model import balloon_drain_rate, effective_capacity, eq1_estimate
from .share_cache import ShareSampler
from .types import DomainConfig, JobSpec, JobState, MachineSpec, PerfParams

logger = logging.getLogger(__name__)

JOB_FILE = "job.json"
DEFAULT_IMAGES = frozenset({"slc4"})
OOM_EXIT_CODE = 137
KILLED_EXIT_CODE = 143

_EPS = 1e-9
_MEM_EPS = 1e-6


@dataclass
class Volume:
    volume_id: str
    image_id: str
    size_gb: float
    attached: bool = False
    contextualized: bool = False
    running: str | None = None
    files: dict[str, str] = field(default_factory=dict)


@dataclass
class JobStatus:
    """Snapshot of a sandboxed payload."""

    job_id: str
    state: JobState
    progress: float
    events_done: int
    eta: float | None
    started_at: float
    finished_at: float | None = None
    exit_code: int | None = None
    error: str | None = None
    cpu_share_avg: float = 0.0
    memory_allocated: float = 0.0
    grant_latencies: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "state": str(self.state),
            "progress": self.progress,
            "events_done": self.events_done,
            "eta": self.eta,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "exit_code": self.exit_code,
            "error": self.error,
            "cpu_share_avg": self.cpu_share_avg,
            "memory_allocated": self.memory_allocated,
            "grant_latencies": list(self.grant_latencies),
        }

    @classmethod
    def from_dict(cls, data: dict) -> JobStatus:
        return cls(
            job_id=str(data["job_id"]),
            state=JobState(data["state"]),
            progress=float(data["progress"]),
            events_done=int(data["events_done"]),
            eta=None if data.get("eta") is None else float(data["eta"]),
            started_at=float(data["started_at"]),
            finished_at=None if data.get("finished_at") is None else float(data["finished_at"]),
            exit_code=data.get("exit_code"),
            error=data.get("error"),
            cpu_share_avg=float(data.get("cpu_share_avg", 0.0)),
            memory_allocated=float(data.get("memory_allocated", 0.0)),
            grant_latencies=[float(x) for x in data.get("grant_latencies", [])],
        )


@dataclass
class _BalloonRequest:
    requested_at: float
    size: float
    served: float = 0.0


@dataclass
class _Payload:
    job: JobSpec
    domain: DomainConfig
    started_at: float
    allocation: float
    state: JobState = JobState.RUNNING
    progress: float = 0.0
    finished_at: float | None = None
    exit_code: int | None = None
    error: str | None = None
    cpu_seconds: float = 0.0
    queue: deque[_BalloonRequest] = field(default_factory=deque)
    latencies: list[float] = field(default_factory=list)

    def demand(self, progress: float | None = None) -> float:
        p = self.progress if progress is None else progress
        return self.job.mem_base + p * self.job.event_count * self.job.mem_per_event

    def progress_at(self, memory: float) -> float:
        """Progress at which demand reaches *memory* MiB (inf if it never does)."""
        growth = self.job.event_count * self.job.mem_per_event
        if growth <= 0:
            return math.inf
        return (memory - self.job.mem_base) / growth

    @property
    def pending(self) -> float:
        return sum(r.size for r in self.queue)

    def finish(self, now: float, state: JobState, exit_code: int, error: str | None) -> None:
        self.state = state
        self.finished_at = now
        self.exit_code = exit_code
        self.error = error
        self.queue.clear()


@dataclass
class _Running:
    handle: str
    domain: DomainConfig
    volume_id: str
    payload: _Payload | None


@runtime_checkable
class DeploymentEngine(Protocol):
    """What the VIRM service needs from a hypervisor back end."""

    name: str
    images: frozenset[str]

    def provision_volume(self, image_id: str, size_gb: float) -> str: ...

    def attach(self, volume_id: str) -> None: ...

    def detach(self, volume_id: str) -> None: ...

    def write_file(self, volume_id: str, name: str, content: str) -> None: ...

    def read_files(self, volume_id: str) -> dict[str, str]: ...

    def boot(self, domain: DomainConfig, volume_id: str) -> str: ...

    def shutdown(self, handle: str) -> None: ...

    def destroy_volume(self, volume_id: str) -> None: ...

    def advance_to(self, t: float) -> None: ...

    def job_status(self, handle: str) -> JobStatus | None: ...


class SimulatedEngine:
    """In-process engine driving payloads from scheduler shares and PerfParams.

    Every operation first catches the engine up with *clock*. ``calls`` records
    each volume and domain operation in order.
    """

    name = "simulated"

    def __init__(
        self,
        machine: MachineSpec,
        params: PerfParams,
        clock: VirtualClock | None = None,
        *,
        images: frozenset[str] = DEFAULT_IMAGES,
        sampler: ShareSampler | None = None,
    ) -> None:
        self.machine = machine
        self.params = params
        self.clock = clock or VirtualClock()
        self.images = images
        self.calls: list[tuple[str, str]] = []
        self._sampler = sampler or ShareSampler.get_instance()
        self._volumes: dict[str, Volume] = {}
        self._running: dict[str, _Running] = {}
        self._stopped: dict[str, _Payload | None] = {}
        self._now = self.clock.now()
        self._next_volume = 1
        self._next_handle = 1
        self._lock = threading.RLock()

    @property
    def now(self) -> float:
        return self._now

    # ------------------------------------------------------------------
    # Volumes
    # ------------------------------------------------------------------

    def _volume(self, volume_id: str) -> Volume:
        try:
            return self._volumes[volume_id]
        except KeyError:
            raise EngineError(f"no volume {volume_id!r}") from None

    def provision_volume(self, image_id: str, size_gb: float) -> str:
        with self._lock:
            if image_id not in self.images:
                raise EngineError(f"image {image_id!r} is not available")
            volume_id = f"vol-{self._next_volume:04d}"
            self._next_volume += 1
            self._volumes[volume_id] = Volume(volume_id, image_id, size_gb)
            self.calls.append(("provision_volume", volume_id))
            logger.debug("Provisioned %s from %s (%.1f GB)", volume_id, image_id, size_gb)
            return volume_id

    def attach(self, volume_id: str) -> None:
        with self._lock:
            volume = self._volume(volume_id)
            if volume.attached or volume.running:
                raise EngineError(f"{volume_id} is busy")
            volume.attached = True
            self.calls.append(("attach", volume_id))

    def detach(self, volume_id: str) -> None:
        with self._lock:
            volume = self._volume(volume_id)
            if not volume.attached:
                raise EngineError(f"{volume_id} is not attached")
            volume.attached = False
            volume.contextualized = True
            self.calls.append(("detach", volume_id))

    def write_file(self, volume_id: str, name: str, content: str) -> None:
        with self._lock:
            volume = self._volume(volume_id)
            if not volume.attached:
                raise EngineError(f"{volume_id} must be attached to write {name}")
            volume.files[name] = content
            self.calls.append(("write_file", f"{volume_id}:{name}"))

    def read_files(self, volume_id: str) -> dict[str, str]:
        with self._lock:
            return dict(self._volume(volume_id).files)

    def destroy_volume(self, volume_id: str) -> None:
        with self._lock:
            volume = self._volume(volume_id)
            if volume.running:
                raise EngineError(f"{volume_id} backs running domain {volume.running}")
            if volume.attached:
                raise EngineError(f"{volume_id} is still attached")
            del self._volumes[volume_id]
            self.calls.append(("destroy_volume", volume_id))

    # ------------------------------------------------------------------
    # Domains
    # ------------------------------------------------------------------

    def _free_memory(self) -> float:
        used = sum(
            r.payload.allocation if r.payload else r.domain.memory for r in self._running.values()
        )
        return self.machine.total_memory - self.machine.dom0_memory - used

    def boot(self, domain: DomainConfig, volume_id: str) -> str:
        with self._lock:
            self._sync()
            volume = self._volume(volume_id)
            if volume.attached or not volume.contextualized:
                raise EngineError(f"{volume_id} must be contextualized and detached before boot")
            if volume.running:
                raise EngineError(f"{volume_id} already backs {volume.running}")
            if domain.memory > self._free_memory():
                raise EngineError(
                    f"{domain.domain_id} needs {domain.memory} MiB, "
                    f"{self._free_memory():.0f} MiB free"
                )

            payload = None
            if JOB_FILE in volume.files:
                try:
                    job = JobSpec.from_dict(json.loads(volume.files[JOB_FILE]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise EngineError(f"{volume_id}: unreadable {JOB_FILE}: {exc}") from exc
                payload = _Payload(
                    job=job, domain=domain, started_at=self._now, allocation=domain.memory
                )

            handle = f"vm-{self._next_handle:04d}"
            self._next_handle += 1
            volume.running = handle
            self._running[handle] = _Running(handle, domain, volume_id, payload)
            self.calls.append(("boot", handle))
            logger.info("Booted %s as %s on %s", domain.domain_id, handle, volume_id)
            self._settle()
            return handle

    def shutdown(self, handle: str) -> None:
        with self._lock:
            self._sync()
            running = self._running.pop(handle, None)
            if running is None:
                raise EngineError(f"no running domain {handle!r}")
            payload = running.payload
            if payload is not None and payload.state == JobState.RUNNING:
                payload.finish(self._now, JobState.FAILED, KILLED_EXIT_CODE, "domain shut down")
            self._volumes[running.volume_id].running = None
            self._stopped[handle] = payload
            self.calls.append(("shutdown", handle))
            logger.info("Shut down %s (%s)", handle, running.domain.domain_id)

    def running_domains(self) -> list[str]:
        with self._lock:
            return [r.domain.domain_id for r in self._running.values()]

    # ------------------------------------------------------------------
    # Payload progress
    # ------------------------------------------------------------------

    def _busy(self) -> list[_Payload]:
        return [
            r.payload
            for r in self._running.values()
            if r.payload is not None and r.payload.state == JobState.RUNNING
        ]

    def _capacities(self, busy: list[_Payload]) -> dict[str, tuple[float, float]]:
        """(capacity in CPUs, progress per second) for each busy domain."""
        if not busy:
            return {}
        shares = self._sampler.shares(self.machine, [p.domain for p in busy])
        n_vm = len(busy)
        result = {}
        for p in busy:
            dom = p.domain
            capacity = effective_capacity(dom, n_vm, self.machine, share=shares[dom.domain_id])
            try:
                seconds = eq1_estimate(
                    self.params, dom, p.job, n_vm, machine=self.machine, share=capacity
                )
                seconds -= self.params.k_setup_shutdown
            except PerfModelError as exc:
                logger.warning("%s cannot make progress: %s", dom.domain_id, exc)
                result[dom.domain_id] = (capacity, 0.0)
                continue
            result[dom.domain_id] = (capacity, 1.0 / seconds if seconds > 0 else math.inf)
        return result

    def _drain_rate(self, p: _Payload, capacity: float) -> float:
        if not p.queue or p.queue[0].size > self._free_memory() + _MEM_EPS:
            return 0.0
        return balloon_drain_rate(self.params, p.domain, p.pending, share=capacity)

    def _next_event(self, busy: list[_Payload], rates: dict[str, tuple[float, float]]) -> float:
        t_next = math.inf
        limit = self.params.balloon_queue_limit
        for p in busy:
            capacity, rate = rates[p.domain.domain_id]
            if rate > 0:
                if math.isinf(rate):
                    return self._now
                candidates = [
                    1.0,
                    p.progress_at(p.allocation + p.pending),
                    p.progress_at(p.allocation + limit),
                ]
                for target in candidates:
                    if target > p.progress:
                        t_next = min(t_next, self._now + (target - p.progress) / rate)
            drain = self._drain_rate(p, capacity)
            if drain > 0:
                head = p.queue[0]
                t_next = min(t_next, self._now + (head.size - head.served) / drain)
        return t_next

    def _integrate(
        self, busy: list[_Payload], rates: dict[str, tuple[float, float]], dt: float
    ) -> None:
        for p in busy:
            capacity, rate = rates[p.domain.domain_id]
            drain = self._drain_rate(p, capacity)
            p.progress = 1.0 if math.isinf(rate) else min(1.0, p.progress + rate * dt)
            p.cpu_seconds += capacity * dt
            if drain > 0:
                p.queue[0].served += drain * dt

    def _settle(self) -> None:
        """Apply everything due at the current instant."""
        chunk = self.params.balloon_chunk
        limit = self.params.balloon_queue_limit
        for running in self._running.values():
            p = running.payload
            if p is None or p.state != JobState.RUNNING:
                continue
            if p.progress >= 1.0 - _EPS:
                p.progress = 1.0
                p.finish(self._now, JobState.DONE, 0, None)
                logger.info("%s finished %s at t=%.1f", running.handle, p.job.job_id, self._now)
                continue
            while p.queue and p.queue[0].served >= p.queue[0].size - _MEM_EPS:
                head = p.queue.popleft()
                p.allocation += head.size
                p.latencies.append(self._now - head.requested_at)
            if p.demand() - p.allocation >= limit - _MEM_EPS:
                p.finish(self._now, JobState.FAILED, OOM_EXIT_CODE, "OOM")
                logger.warning(
                    "%s killed: %.0f MiB short with balloon queue limit %.0f MiB",
                    running.handle, p.demand() - p.allocation, limit,
                )
                continue
            while p.demand() >= p.allocation + p.pending - _MEM_EPS and chunk > 0:
                p.queue.append(_BalloonRequest(requested_at=self._now, size=chunk))

    def _sync(self) -> None:
        self.advance_to(self.clock.now())

    def advance_to(self, t: float) -> None:
        """Run payloads forward to virtual time *t*; never moves backwards."""
        with self._lock:
            while self._now < t:
                busy = self._busy()
                rates = self._capacities(busy)
                step_to = min(t, self._next_event(busy, rates))
                if step_to <= self._now:
                    step_to = min(t, math.nextafter(self._now, math.inf))
                self._integrate(busy, rates, step_to - self._now)
                self._now = step_to
                self._settle()

    def job_status(self, handle: str) -> JobStatus | None:
        with self._lock:
            self._sync()
            if handle in self._running:
                payload = self._running[handle].payload
            elif handle in self._stopped:
                payload = self._stopped[handle]
            else:
                raise EngineError(f"unknown domain handle {handle!r}")
            if payload is None:
                return None

            eta = None
            if payload.state == JobState.RUNNING:
                rates = self._capacities(self._busy())
                rate = rates.get(payload.domain.domain_id, (0.0, 0.0))[1]
                if rate > 0:
                    eta = self._now + (1.0 - payload.progress) / rate
            end = payload.finished_at if payload.finished_at is not None else self._now
            elapsed = end - payload.started_at
            return JobStatus(
                job_id=payload.job.job_id,
                state=payload.state,
                progress=payload.progress,
                events_done=int(payload.progress * payload.job.event_count + _EPS),
                eta=eta,
                started_at=payload.started_at,
                finished_at=payload.finished_at,
                exit_code=payload.exit_code,
                error=payload.error,
                cpu_share_avg=payload.cpu_seconds / elapsed if elapsed > 0 else 0.0,
                memory_allocated=payload.allocation,
                grant_latencies=list(payload.latencies),
            )
