"""Shared vocabulary types and enums for the virm-sim stack.

Units: memory in MiB, bandwidth in Mb/s, data sizes in GB (1 GB = 8192 Mb),
durations in seconds unless a field name says otherwise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import StrEnum
from typing import Any

MB_PER_GB = 8192
DOM0_ID = "Domain-0"
DEFAULT_WEIGHT = 256
FAIR_SHARE = "fair_share"


class EndpointKind(StrEnum):
    """Transfer endpoint kind."""

    PHYSICAL = "physical"
    VIRTUAL = "virtual"
    DOM0 = "dom0"


class VcpuPriority(StrEnum):
    """Credit-scheduler priority class of a vCPU."""

    UNDER = "under"
    OVER = "over"
    PARKED = "parked"


class WorkspaceState(StrEnum):
    """Lifecycle state of a VIRM workspace."""

    REQUESTED = "requested"
    PROVISIONED = "provisioned"
    MOUNTED = "mounted"
    UNMOUNTED = "unmounted"
    RUNNING = "running"
    STOPPED = "stopped"
    REMOVED = "removed"


class PilotPhase(StrEnum):
    """Pilot lifecycle phase, declared in execution order."""

    INIT = "init"
    DETECT = "detect"
    PREPARE_ENV = "prepare_env"
    STAGE_IN = "stage_in"
    SANDBOX_SETUP = "sandbox_setup"
    RUN_JOB = "run_job"
    SANDBOX_TEARDOWN = "sandbox_teardown"
    STAGE_OUT = "stage_out"
    DONE = "done"
    FAILED = "failed"

    @property
    def order(self) -> int:
        return list(PilotPhase).index(self)


class PilotMode(StrEnum):
    """Whether the pilot runs the payload on the host or inside a VIRM sandbox."""

    DIRECT = "direct"
    VIRTUALIZED = "virtualized"


class JobState(StrEnum):
    """State of the payload running inside a sandbox."""

    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class MachineSpec:
    """Physical host running the hypervisor."""

    pcpus: int = 4
    total_memory: int = 8192
    dom0_memory: int = 2048
    nic_bandwidth: float = 1000.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> MachineSpec:
        return cls(
            pcpus=int(data.get("pcpus", 4)),
            total_memory=int(data.get("total_memory", 8192)),
            dom0_memory=int(data.get("dom0_memory", 2048)),
            nic_bandwidth=float(data.get("nic_bandwidth", 1000.0)),
        )


@dataclass(frozen=True)
class DomainConfig:
    """One guest VM: vCPUs (P_i), memory (M_i), weight (W_i), cap (C_i) and pinning.

    ``cap`` is percent of one pCPU, 0 meaning uncapped. ``pinning`` is None for
    fair-share placement or a tuple of pCPU indices.
    """

    domain_id: str
    vcpus: int = 1
    memory: int = 2048
    weight: int = DEFAULT_WEIGHT
    cap: int = 0
    pinning: tuple[int, ...] | None = None

    @property
    def fair_share(self) -> bool:
        return self.pinning is None

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "vcpus": self.vcpus,
            "memory": self.memory,
            "weight": self.weight,
            "cap": self.cap,
            "pinning": FAIR_SHARE if self.pinning is None else list(self.pinning),
        }

    @classmethod
    def from_dict(cls, data: dict) -> DomainConfig:
        pinning = data.get("pinning", FAIR_SHARE)
        return cls(
            domain_id=str(data["domain_id"]),
            vcpus=int(data.get("vcpus", 1)),
            memory=int(data.get("memory", 2048)),
            weight=int(data.get("weight", DEFAULT_WEIGHT)),
            cap=int(data.get("cap", 0)),
            pinning=None if pinning in (None, FAIR_SHARE) else tuple(int(p) for p in pinning),
        )


@dataclass(frozen=True)
class JobSpec:
    """Payload workload: CPU work, event count, memory growth and dataset sizes."""

    cpu_work: float
    event_count: int = 1
    mem_base: float = 1024.0
    mem_per_event: float = 0.0
    input_size: float = 0.0
    output_size: float = 0.0
    job_id: str = "job-0"

    def peak_memory(self) -> float:
        return self.mem_base + self.event_count * self.mem_per_event

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, index: int = 0) -> JobSpec:
        return cls(
            cpu_work=float(data["cpu_work"]),
            event_count=int(data.get("event_count", 1)),
            mem_base=float(data.get("mem_base", 1024.0)),
            mem_per_event=float(data.get("mem_per_event", 0.0)),
            input_size=float(data.get("input_size", 0.0)),
            output_size=float(data.get("output_size", 0.0)),
            job_id=str(data.get("job_id", f"job-{index}")),
        )


@dataclass(frozen=True)
class HeartbeatPolicy:
    """Keep-alive contract between a running sandbox's pilot and the service."""

    interval: float = 30.0
    miss_threshold: int = 3
    sweep_period: float = 10.0

    @property
    def lease_seconds(self) -> float:
        return self.interval * self.miss_threshold

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> HeartbeatPolicy:
        return cls(
            interval=float(data.get("interval", 30.0)),
            miss_threshold=int(data.get("miss_threshold", 3)),
            sweep_period=float(data.get("sweep_period", 10.0)),
        )


@dataclass(frozen=True)
class TransferRate:
    """One measured throughput row: endpoints, parallel domains, Mb/s."""

    src: EndpointKind
    dst: EndpointKind
    n_parallel: int
    mbps: float

    def to_dict(self) -> dict:
        return {
            "src": str(self.src),
            "dst": str(self.dst),
            "n_parallel": self.n_parallel,
            "mbps": self.mbps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> TransferRate:
        return cls(
            src=EndpointKind(data["src"]),
            dst=EndpointKind(data["dst"]),
            n_parallel=int(data["n_parallel"]),
            mbps=float(data["mbps"]),
        )


# Table order matters: duplicate (endpoints, n) rows are addressed by trial index.
DEFAULT_TRANSFER_MATRIX: tuple[TransferRate, ...] = (
    TransferRate(EndpointKind.PHYSICAL, EndpointKind.PHYSICAL, 0, 62.8),
    TransferRate(EndpointKind.PHYSICAL, EndpointKind.VIRTUAL, 0, 8.8),
    TransferRate(EndpointKind.PHYSICAL, EndpointKind.VIRTUAL, 3, 8.3),
    TransferRate(EndpointKind.VIRTUAL, EndpointKind.VIRTUAL, 3, 6.4),
    TransferRate(EndpointKind.VIRTUAL, EndpointKind.VIRTUAL, 3, 6.6),
)


@dataclass(frozen=True)
class PerfParams:
    """Calibrated constants of the completion-time, memory, network and balloon models.

    The completion-time composition constants are ``cpu_bound_fraction`` (share of the
    reference run that scales with CPU capacity), ``max_parallelism`` (CPUs the
    payload can keep busy, None for unbounded) and ``contention_per_vm``
    (slowdown added by each additional parallel VM).
    """

    k_setup_shutdown: float = 180.0
    mem_curve: tuple[tuple[float, float], ...] = (
        (512.0, 1.035),
        (2048.0, 1.02),
        (3072.0, 1.01),
        (8192.0, 1.0),
    )
    dom0_throughput_curve: tuple[tuple[float, float], ...] = (
        (512.0, 20.0),
        (1024.0, 50.0),
        (2048.0, 50.0),
    )
    transfer_matrix: tuple[TransferRate, ...] = DEFAULT_TRANSFER_MATRIX
    cpu_bound_fraction: float = 1.0
    max_parallelism: int | None = None
    contention_per_vm: float = 0.0
    reference_cpu_work: float = 28320.0
    bare_metal_mbps: float = 62.8
    balloon_base_rate: float = 32.0
    balloon_chunk: float = 64.0
    balloon_queue_limit: float = 512.0
    literal_eq1: bool = False

    def to_dict(self) -> dict:
        return {
            "k_setup_shutdown": self.k_setup_shutdown,
            "mem_curve": [list(p) for p in self.mem_curve],
            "dom0_throughput_curve": [list(p) for p in self.dom0_throughput_curve],
            "transfer_matrix": [r.to_dict() for r in self.transfer_matrix],
            "cpu_bound_fraction": self.cpu_bound_fraction,
            "max_parallelism": self.max_parallelism,
            "contention_per_vm": self.contention_per_vm,
            "reference_cpu_work": self.reference_cpu_work,
            "bare_metal_mbps": self.bare_metal_mbps,
            "balloon_base_rate": self.balloon_base_rate,
            "balloon_chunk": self.balloon_chunk,
            "balloon_queue_limit": self.balloon_queue_limit,
            "literal_eq1": self.literal_eq1,
        }

    @classmethod
    def from_dict(cls, data: dict) -> PerfParams:
        kwargs: dict[str, Any] = {}
        for key in (
            "k_setup_shutdown",
            "cpu_bound_fraction",
            "contention_per_vm",
            "reference_cpu_work",
            "bare_metal_mbps",
            "balloon_base_rate",
            "balloon_chunk",
            "balloon_queue_limit",
        ):
            if key in data:
                kwargs[key] = float(data[key])
        if "literal_eq1" in data:
            kwargs["literal_eq1"] = bool(data["literal_eq1"])
        if data.get("max_parallelism") is not None:
            kwargs["max_parallelism"] = int(data["max_parallelism"])
        for key in ("mem_curve", "dom0_throughput_curve"):
            if key in data:
                kwargs[key] = tuple((float(x), float(y)) for x, y in data[key])
        if "transfer_matrix" in data:
            kwargs["transfer_matrix"] = tuple(
                TransferRate.from_dict(r) for r in data["transfer_matrix"]
            )
        return cls(**kwargs)


@dataclass(frozen=True)
class Scenario:
    """A validated-or-not experiment: host, guests, workloads and model constants.

    ``jobs[i]`` runs inside ``domains[i]``; a scenario without domains runs its
    jobs directly on the host.
    """

    machine: MachineSpec = field(default_factory=MachineSpec)
    domains: tuple[DomainConfig, ...] = ()
    jobs: tuple[JobSpec, ...] = ()
    perf_params: PerfParams = field(default_factory=PerfParams)
    heartbeat: HeartbeatPolicy = field(default_factory=HeartbeatPolicy)
    conf_id: str = "scenario"
    baseline_s: float | None = None
    image_id: str = "slc4"
    volume_size: float = 10.0

    def to_dict(self) -> dict:
        d: dict = {
            "conf_id": self.conf_id,
            "machine": self.machine.to_dict(),
            "domains": [dom.to_dict() for dom in self.domains],
            "jobs": [job.to_dict() for job in self.jobs],
            "perf_params": self.perf_params.to_dict(),
            "heartbeat": self.heartbeat.to_dict(),
            "image_id": self.image_id,
            "volume_size": self.volume_size,
        }
        if self.baseline_s is not None:
            d["baseline_s"] = self.baseline_s
        return d


@dataclass(frozen=True)
class TransferRecord:
    """One staging transfer performed by a pilot."""

    size_gb: float
    src: EndpointKind
    dst: EndpointKind
    seconds: float

    def to_dict(self) -> dict:
        return {
            "size_gb": self.size_gb,
            "src": str(self.src),
            "dst": str(self.dst),
            "seconds": self.seconds,
        }


@dataclass
class MetricsRecord:
    """Per-pilot outputs of a scenario run.

    ``t_job`` is setup/shutdown plus compute, the quantity comparable with the
    published completion times; ``t_total`` adds staging.
    """

    conf_id: str
    pilot_id: str
    status: PilotPhase
    t_total: float
    t_job: float
    overhead_pct: float
    cpu_share_avg: float
    heartbeats_sent: int
    t_stage_in: float = 0.0
    t_stage_out: float = 0.0
    transfers: list[TransferRecord] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        d: dict = {
            "conf_id": self.conf_id,
            "pilot_id": self.pilot_id,
            "status": str(self.status),
            "t_total": self.t_total,
            "t_job": self.t_job,
            "overhead_pct": self.overhead_pct,
            "cpu_share_avg": self.cpu_share_avg,
            "heartbeats_sent": self.heartbeats_sent,
            "t_stage_in": self.t_stage_in,
            "t_stage_out": self.t_stage_out,
            "transfers": [t.to_dict() for t in self.transfers],
        }
        if self.error is not None:
            d["error"] = self.error
        return d
