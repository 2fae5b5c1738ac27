"""Deterministic model of the Xen credit scheduler.

Every accounting period (30 ms) each runnable domain is granted credits in
proportion to its weight, clamped by its cap; every slice (10 ms) each pCPU
runs one eligible vCPU, UNDER before OVER, least-recently-run first. Caps are
enforced with a per-domain allowance that parks the domain once spent.

All time bookkeeping is in integer milliseconds so identical inputs produce
bit-identical cpu-time figures.
"""

from __future__ import annotations

import bisect
import csv
import logging
import math
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

from .exceptions import SchedulerError, WindowTooLargeError
from .types import DEFAULT_WEIGHT, DOM0_ID, DomainConfig, MachineSpec, VcpuPriority

logger = logging.getLogger(__name__)

TRACE_HEADER = ("time_ms", "pcpu", "domain_id", "vcpu", "priority")


class LoadKind(StrEnum):
    CPU_BOUND = "cpu_bound"
    IDLE = "idle"
    INTERMITTENT = "intermittent"


@dataclass(frozen=True)
class LoadPattern:
    """When a guest domain has work for its vCPUs."""

    kind: LoadKind = LoadKind.CPU_BOUND
    busy_ms: int = 0
    idle_ms: int = 0
    phase_ms: int = 0

    @classmethod
    def cpu_bound(cls) -> LoadPattern:
        return cls(LoadKind.CPU_BOUND)

    @classmethod
    def idle(cls) -> LoadPattern:
        return cls(LoadKind.IDLE)

    @classmethod
    def intermittent(cls, busy_ms: int, idle_ms: int, phase_ms: int = 0) -> LoadPattern:
        if busy_ms <= 0 or idle_ms < 0:
            raise ValueError("intermittent load needs busy_ms > 0 and idle_ms >= 0")
        return cls(LoadKind.INTERMITTENT, busy_ms, idle_ms, phase_ms)

    def runnable(self, now_ms: int) -> bool:
        if self.kind is LoadKind.CPU_BOUND:
            return True
        if self.kind is LoadKind.IDLE:
            return False
        cycle = self.busy_ms + self.idle_ms
        return (now_ms + self.phase_ms) % cycle < self.busy_ms


@dataclass
class SchedulerClock:
    """Scheduler time: now in ms plus the slice and accounting periods."""

    now: int = 0
    slice_ms: int = 10
    accounting_ms: int = 30

    def __post_init__(self) -> None:
        if self.slice_ms <= 0 or self.accounting_ms <= 0 or self.accounting_ms % self.slice_ms:
            raise SchedulerError(
                f"accounting period {self.accounting_ms} ms must be a positive multiple "
                f"of the {self.slice_ms} ms slice"
            )

    @property
    def at_accounting_boundary(self) -> bool:
        return self.now % self.accounting_ms == 0

    def next_boundary(self) -> int:
        return (self.now // self.slice_ms + 1) * self.slice_ms


@dataclass
class VcpuState:
    """One schedulable vCPU."""

    owner: str
    index: int
    credits: float = 0.0
    priority: VcpuPriority = VcpuPriority.OVER
    assigned_pcpu: int | None = None
    cpu_time_ms: int = 0
    last_run_ms: int = -1
    pcpu_time_ms: dict[int, int] = field(default_factory=dict)

    @property
    def cpu_time_accumulated(self) -> float:
        """Seconds of pCPU time this vCPU has received."""
        return self.cpu_time_ms / 1000.0


@dataclass
class _Domain:
    config: DomainConfig
    vcpus: list[VcpuState]
    load: LoadPattern
    allowance_ms: float = 0.0


class CreditScheduler:
    """Credit scheduler over one host.

    Dom_0 is an implicit domain with weight 256 and one vCPU per pCPU that is
    runnable only while proxy work is queued via :meth:`submit_dom0_work`.

    Cumulative CPU time is snapshotted at accounting boundaries, and only
    enough snapshots to answer a *max_window* second report are kept.
    """

    def __init__(
        self,
        machine: MachineSpec,
        domains: Sequence[DomainConfig] = (),
        *,
        slice_ms: int = 10,
        accounting_ms: int = 30,
        dom0_weight: int = DEFAULT_WEIGHT,
        max_window: float = 60.0,
        trace: bool = False,
    ) -> None:
        self.machine = machine
        self.clock = SchedulerClock(slice_ms=slice_ms, accounting_ms=accounting_ms)
        self._domains: dict[str, _Domain] = {}
        self._dom0_pending_ms = 0.0
        self._trace_enabled = trace
        self._trace: list[tuple[int, int, str, int, str]] = []
        self._cumulative: dict[str, int] = {}
        self._max_window_ms = round(max_window * 1000)
        self._snapshots: deque[tuple[int, dict[str, int]]] = deque(
            [(0, {})], maxlen=self._max_window_ms // accounting_ms + 2
        )
        self._accounted_at = -1

        dom0 = DomainConfig(
            DOM0_ID, vcpus=machine.pcpus, memory=machine.dom0_memory, weight=dom0_weight
        )
        self._register(dom0, LoadPattern.idle())
        for dom in domains:
            self.add_domain(dom)
        logger.debug(
            "CreditScheduler initialized: %d pCPUs, %d guest domains",
            machine.pcpus,
            len(domains),
        )

    # ------------------------------------------------------------------
    # Registration
    # ------------------------------------------------------------------

    def _register(self, config: DomainConfig, load: LoadPattern) -> None:
        vcpus = [VcpuState(owner=config.domain_id, index=i) for i in range(config.vcpus)]
        cap_ms = self._cap_ms(config)
        self._domains[config.domain_id] = _Domain(
            config=config,
            vcpus=vcpus,
            load=load,
            allowance_ms=cap_ms if cap_ms is not None else 0.0,
        )
        self._cumulative.setdefault(config.domain_id, 0)
        self._refresh_priorities()

    def add_domain(self, config: DomainConfig, load: LoadPattern | None = None) -> None:
        if config.domain_id in self._domains:
            raise SchedulerError(f"domain {config.domain_id!r} is already scheduled")
        self._register(config, load or LoadPattern.cpu_bound())

    def remove_domain(self, domain_id: str) -> None:
        if domain_id == DOM0_ID or domain_id not in self._domains:
            raise SchedulerError(f"cannot remove domain {domain_id!r}")
        del self._domains[domain_id]

    def set_load(self, domain_id: str, load: LoadPattern) -> None:
        self._domains[domain_id].load = load

    def submit_dom0_work(self, ms: float) -> None:
        """Queue *ms* of Dom_0 proxy work (I/O forwarding, balloon servicing)."""
        if ms < 0:
            raise ValueError("dom0 work must be >= 0")
        self._dom0_pending_ms += ms

    @property
    def dom0_pending_ms(self) -> float:
        return self._dom0_pending_ms

    @property
    def domain_ids(self) -> list[str]:
        return [d for d in self._domains if d != DOM0_ID]

    def vcpu_states(self, domain_id: str | None = None) -> list[VcpuState]:
        if domain_id is not None:
            return list(self._domains[domain_id].vcpus)
        return [v for dom in self._domains.values() for v in dom.vcpus]

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    def _cap_ms(self, config: DomainConfig) -> float | None:
        if config.cap <= 0:
            return None
        return config.cap / 100.0 * self.clock.accounting_ms

    def _runnable_vcpus(self, dom: _Domain) -> int:
        if dom.config.domain_id == DOM0_ID:
            if self._dom0_pending_ms <= 0:
                return 0
            return min(len(dom.vcpus), math.ceil(self._dom0_pending_ms / self.clock.slice_ms))
        return len(dom.vcpus) if dom.load.runnable(self.clock.now) else 0

    def _parked(self, dom: _Domain) -> bool:
        return self._cap_ms(dom.config) is not None and dom.allowance_ms <= 0

    def _refresh_priorities(self) -> None:
        for dom in self._domains.values():
            parked = self._parked(dom)
            for v in dom.vcpus:
                if parked:
                    v.priority = VcpuPriority.PARKED
                elif v.credits > 0:
                    v.priority = VcpuPriority.UNDER
                else:
                    v.priority = VcpuPriority.OVER

    # ------------------------------------------------------------------
    # Core operations
    # ------------------------------------------------------------------

    def account_credits(self) -> None:
        """Grant one accounting period of credits to every runnable domain."""
        if not self.clock.at_accounting_boundary:
            raise SchedulerError(f"t={self.clock.now} ms is not an accounting boundary")

        period = self.clock.accounting_ms
        runnable = [d for d in self._domains.values() if self._runnable_vcpus(d) > 0]
        total_weight = sum(d.config.weight for d in runnable)
        capacity = self.machine.pcpus * period

        for dom in self._domains.values():
            for v in dom.vcpus:
                # Carried balance is bounded to one period either way.
                v.credits = min(max(v.credits, -period), period)

        for dom in runnable:
            grant = capacity * dom.config.weight / total_weight
            cap_ms = self._cap_ms(dom.config)
            if cap_ms is not None:
                grant = min(grant, cap_ms)
            share = grant / len(dom.vcpus)
            for v in dom.vcpus:
                v.credits += share

        for dom in self._domains.values():
            cap_ms = self._cap_ms(dom.config)
            if cap_ms is not None:
                dom.allowance_ms = min(dom.allowance_ms + cap_ms, cap_ms)

        self._accounted_at = self.clock.now
        self._refresh_priorities()

    @staticmethod
    def _eligible(dom: _Domain, pcpu: int) -> bool:
        pinning = dom.config.pinning
        return pinning is None or pcpu in pinning

    def pick_and_run_slice(self, duration_ms: int | None = None) -> dict[int, VcpuState]:
        """Run one slice (or the remainder of one) on every pCPU.

        Returns:
            Mapping of pCPU index to the vCPU that ran on it; idle pCPUs are absent.
        """
        clock = self.clock
        if duration_ms is None:
            duration_ms = clock.next_boundary() - clock.now
        if duration_ms <= 0 or clock.now + duration_ms > clock.next_boundary():
            raise SchedulerError(f"slice of {duration_ms} ms crosses a slice boundary")

        candidates: list[tuple[_Domain, VcpuState]] = []
        for dom in self._domains.values():
            if self._parked(dom):
                continue
            n_runnable = self._runnable_vcpus(dom)
            candidates.extend((dom, v) for v in dom.vcpus[:n_runnable])

        chosen: dict[int, tuple[_Domain, VcpuState]] = {}
        taken: set[tuple[str, int]] = set()
        for pcpu in range(self.machine.pcpus):
            eligible = [
                (dom, v)
                for dom, v in candidates
                if (v.owner, v.index) not in taken and self._eligible(dom, pcpu)
            ]
            if not eligible:
                continue
            dom, v = min(
                eligible,
                key=lambda dv: (
                    dv[1].priority is not VcpuPriority.UNDER,
                    dv[1].last_run_ms,
                    dv[1].owner,
                    dv[1].index,
                ),
            )
            chosen[pcpu] = (dom, v)
            taken.add((v.owner, v.index))

        for v in self.vcpu_states():
            v.assigned_pcpu = None

        for pcpu, (dom, v) in chosen.items():
            if self._trace_enabled:
                self._trace.append((clock.now, pcpu, v.owner, v.index, str(v.priority)))
            v.assigned_pcpu = pcpu
            v.credits -= duration_ms
            v.cpu_time_ms += duration_ms
            v.pcpu_time_ms[pcpu] = v.pcpu_time_ms.get(pcpu, 0) + duration_ms
            v.last_run_ms = clock.now
            self._cumulative[v.owner] += duration_ms
            if self._cap_ms(dom.config) is not None:
                dom.allowance_ms -= duration_ms
            if v.owner == DOM0_ID:
                self._dom0_pending_ms = max(0.0, self._dom0_pending_ms - duration_ms)

        clock.now += duration_ms
        self._refresh_priorities()
        if clock.at_accounting_boundary:
            self._snapshots.append((clock.now, dict(self._cumulative)))
        return {pcpu: v for pcpu, (_, v) in chosen.items()}

    def run_until(self, t: float) -> None:
        """Advance through slice and accounting boundaries to exactly *t* seconds."""
        target = round(t * 1000)
        clock = self.clock
        if target < clock.now:
            raise SchedulerError(f"cannot run back to {target} ms from {clock.now} ms")
        while clock.now < target:
            if clock.at_accounting_boundary and self._accounted_at != clock.now:
                self.account_credits()
            step = min(clock.next_boundary(), target) - clock.now
            self.pick_and_run_slice(step)

    # ------------------------------------------------------------------
    # Readouts
    # ------------------------------------------------------------------

    def domain_cpu_time(self, domain_id: str) -> float:
        """Seconds of CPU a domain has received since it was first scheduled."""
        return self._cumulative[domain_id] / 1000.0

    def cpu_share_report(self, window: float) -> dict[str, float]:
        """Per-domain CPUs used over the trailing *window* seconds, in [0, pcpus].

        A window that starts between accounting boundaries is widened back to
        the previous boundary.
        """
        window_ms = round(window * 1000)
        if window_ms <= 0:
            raise ValueError(f"window must be positive, got {window}")
        now = self.clock.now
        if window_ms > now:
            raise WindowTooLargeError(
                f"window {window_ms} ms exceeds simulated history of {now} ms",
                details={"window_ms": window_ms, "now_ms": now},
            )
        if window_ms > self._max_window_ms:
            raise WindowTooLargeError(
                f"window {window_ms} ms exceeds the retained {self._max_window_ms} ms",
                details={"window_ms": window_ms, "max_window_ms": self._max_window_ms},
            )
        idx = bisect.bisect_right(self._snapshots, now - window_ms, key=lambda s: s[0]) - 1
        start_t, start = self._snapshots[idx]
        span = now - start_t
        return {
            domain_id: (total - start.get(domain_id, 0)) / span
            for domain_id, total in sorted(self._cumulative.items())
        }

    def trace_rows(self) -> list[tuple[int, int, str, int, str]]:
        return list(self._trace)

    def write_trace_csv(self, path: Path | str) -> Path:
        """Write one CSV row per scheduled slice."""
        if not self._trace_enabled:
            raise SchedulerError("scheduler was created without trace=True")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_HEADER)
            writer.writerows(self._trace)
        return path


def steady_state_shares(
    machine: MachineSpec,
    domains: Iterable[DomainConfig],
    warmup: float = 0.3,
    window: float = 3.0,
) -> dict[str, float]:
    """Shares of an all-CPU-bound domain set after a short warmup."""
    sched = CreditScheduler(machine, list(domains), max_window=window)
    sched.run_until(warmup + window)
    report = sched.cpu_share_report(window)
    report.pop(DOM0_ID, None)
    return report
