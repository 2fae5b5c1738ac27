"""Completion-time, memory, network and ballooning models.

The completion estimate composes a memory slowdown, a contention factor and the
reference CPU work spread over the capacity a domain actually gets:

    T = K + m(M) * (1 + beta * (n_vm - 1)) * W * (phi / min(c, d) + (1 - phi))

where ``c`` is the effective capacity in CPUs (cap, vCPUs and the weight share
of contended pCPUs), ``d`` the payload's usable parallelism and ``phi`` the
CPU-bound fraction of the work. ``literal_eq1`` switches to the printed formula
``K + m(M) * W / (C * n_vm)`` for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import PerfModelError, UnknownEndpointKindError, ZeroCapacityError
from .types import (
    MB_PER_GB,
    DomainConfig,
    EndpointKind,
    JobSpec,
    MachineSpec,
    PerfParams,
    TransferRate,
)

ERROR_LOG_BUNDLE_GB = 0.01


@dataclass(frozen=True)
class CompletionEstimate:
    """Breakdown of a job's completion time."""

    t_setup: float
    t_compute: float
    t_stage_in: float
    t_stage_out: float
    n_parallel: int

    def __post_init__(self) -> None:
        parts = (self.t_setup, self.t_compute, self.t_stage_in, self.t_stage_out)
        if any(p < 0 for p in parts):
            raise PerfModelError(f"negative completion component in {parts}")

    @property
    def t_total(self) -> float:
        return self.t_setup + self.t_compute + self.t_stage_in + self.t_stage_out


def _interp(curve: tuple[tuple[float, float], ...], x: float) -> float:
    points = sorted(curve)
    xs = np.array([p[0] for p in points], dtype=float)
    ys = np.array([p[1] for p in points], dtype=float)
    return float(np.interp(x, xs, ys))


def mem_slowdown(params: PerfParams, m: float) -> float:
    """Slowdown factor (>= 1) of a domain with *m* MiB, clamped at the curve ends."""
    if m <= 0:
        raise ValueError(f"memory must be > 0, got {m}")
    return max(1.0, _interp(params.mem_curve, m))


def dom0_throughput(params: PerfParams, dom0_mem: float) -> float:
    """Mb/s Dom_0 sustains when proxying transfers with *dom0_mem* MiB."""
    if dom0_mem <= 0:
        raise ValueError(f"dom0 memory must be > 0, got {dom0_mem}")
    return min(_interp(params.dom0_throughput_curve, dom0_mem), params.bare_metal_mbps)


def effective_capacity(
    dom: DomainConfig,
    n_vm: int,
    machine: MachineSpec | None = None,
    share: float | None = None,
) -> float:
    """CPUs a domain can use: its cap, its vCPUs and its slice of contended pCPUs.

    *share* overrides the weight-share estimate with a measured scheduler share.
    """
    machine = machine or MachineSpec()
    cap_cpus = dom.cap / 100.0 if dom.cap else float(dom.vcpus)
    contended = machine.pcpus / max(n_vm, 1) if share is None else share
    return min(cap_cpus, float(dom.vcpus), contended)


def compute_seconds(
    params: PerfParams,
    cpu_work: float,
    memory: float,
    capacity: float,
    n_vm: int,
) -> float:
    """Compute phase of the completion estimate, without K."""
    if capacity <= 0:
        raise ZeroCapacityError(
            f"effective capacity {capacity} CPUs leaves no room to run",
            details={"capacity": capacity},
        )
    parallel = params.max_parallelism if params.max_parallelism is not None else math.inf
    usable = min(capacity, parallel)
    phi = params.cpu_bound_fraction
    contention = 1.0 + params.contention_per_vm * max(n_vm - 1, 0)
    return mem_slowdown(params, memory) * contention * cpu_work * (phi / usable + (1.0 - phi))


def direct_seconds(params: PerfParams, job: JobSpec, machine: MachineSpec) -> float:
    """Bare-metal completion: the whole host, no hypervisor, no K."""
    return compute_seconds(params, job.cpu_work, machine.total_memory, machine.pcpus, 0)


def eq1_literal(params: PerfParams, dom: DomainConfig, job: JobSpec, n_vm: int) -> float:
    """The completion formula read literally, dividing by cap times VM count."""
    cap_cpus = dom.cap / 100.0 if dom.cap else float(dom.vcpus)
    if cap_cpus <= 0:
        raise ZeroCapacityError("cap of 0% leaves no capacity", details={"cap": dom.cap})
    slowdown = mem_slowdown(params, dom.memory)
    return params.k_setup_shutdown + slowdown * job.cpu_work / (cap_cpus * n_vm)


def eq1_estimate(
    params: PerfParams,
    dom: DomainConfig,
    job: JobSpec,
    n_vm: int,
    *,
    machine: MachineSpec | None = None,
    share: float | None = None,
) -> float:
    """Seconds from VM request to shutdown for *job* inside *dom* among *n_vm* VMs.

    Non-increasing in cap and memory, non-decreasing in n_vm.

    Raises:
        ZeroCapacityError: if the domain ends up with no CPU capacity.
    """
    if n_vm < 1:
        raise ValueError(f"n_vm must be >= 1, got {n_vm}")
    if dom.cap < 0:
        raise ZeroCapacityError(f"cap {dom.cap} leaves no capacity", details={"cap": dom.cap})
    if params.literal_eq1:
        return eq1_literal(params, dom, job, n_vm)
    capacity = effective_capacity(dom, n_vm, machine, share)
    return params.k_setup_shutdown + compute_seconds(
        params, job.cpu_work, dom.memory, capacity, n_vm
    )


def _endpoint(kind: EndpointKind | str) -> EndpointKind:
    try:
        return EndpointKind(kind)
    except ValueError as exc:
        raise UnknownEndpointKindError(
            f"unknown endpoint kind {kind!r}", details={"kind": str(kind)}
        ) from exc


def throughput(
    params: PerfParams,
    src: EndpointKind | str,
    dst: EndpointKind | str,
    n_parallel: int,
    *,
    dom0_memory: float = 2048.0,
    trial: int = 0,
) -> float:
    """Mb/s between two endpoints with *n_parallel* domains transferring.

    DOM0 endpoints use the Dom_0 throughput curve; other pairs use the measured
    matrix, falling back to the nearest parallel count (ties to the smaller).
    ``trial`` selects among repeated measurements of the same row.
    """
    src, dst = _endpoint(src), _endpoint(dst)
    if EndpointKind.DOM0 in (src, dst):
        return dom0_throughput(params, dom0_memory)

    rows: list[TransferRate] = [r for r in params.transfer_matrix if (r.src, r.dst) == (src, dst)]
    if not rows:
        rows = [r for r in params.transfer_matrix if (r.src, r.dst) == (dst, src)]
    if not rows:
        raise PerfModelError(f"no throughput measured between {src} and {dst}")
    counts = sorted({r.n_parallel for r in rows})
    nearest = min(counts, key=lambda n: (abs(n - n_parallel), n))
    matches = [r for r in rows if r.n_parallel == nearest]
    return matches[min(trial, len(matches) - 1)].mbps


def transfer_time(
    params: PerfParams,
    size: float,
    src: EndpointKind | str,
    dst: EndpointKind | str,
    n_parallel: int,
    *,
    dom0_memory: float = 2048.0,
    trial: int = 0,
) -> float:
    """Seconds to move *size* GB between two endpoints."""
    if size < 0:
        raise ValueError(f"size must be >= 0, got {size}")
    mbps = throughput(params, src, dst, n_parallel, dom0_memory=dom0_memory, trial=trial)
    if size == 0:
        return 0.0
    return size * MB_PER_GB / mbps


def balloon_drain_rate(
    params: PerfParams,
    dom: DomainConfig,
    pending: float,
    share: float | None = None,
) -> float:
    """MiB/s Dom_0 hands back to a domain with *pending* MiB of balloon requests.

    Scaled by the domain's CPU share fraction: a cap-50 single-vCPU domain
    drains at half the base rate. *share* substitutes a measured share in CPUs.
    """
    if pending < 0:
        raise ValueError(f"pending must be >= 0, got {pending}")
    if pending == 0:
        return 0.0
    if share is not None:
        fraction = share / dom.vcpus
    elif dom.cap:
        fraction = dom.cap / (100.0 * dom.vcpus)
    else:
        fraction = 1.0
    return params.balloon_base_rate * min(1.0, max(0.0, fraction))


def completion_estimate(
    params: PerfParams,
    dom: DomainConfig | None,
    job: JobSpec,
    n_vm: int,
    *,
    machine: MachineSpec | None = None,
) -> CompletionEstimate:
    """Full breakdown for a sandboxed job staged through Dom_0.

    With *dom* None the job runs on bare metal: no setup, the whole host and
    host-to-host staging.
    """
    machine = machine or MachineSpec()
    if dom is None:
        t_setup = 0.0
        t_compute = direct_seconds(params, job, machine)
        staging = EndpointKind.PHYSICAL
    else:
        t_setup = params.k_setup_shutdown
        t_compute = eq1_estimate(params, dom, job, n_vm, machine=machine) - t_setup
        staging = EndpointKind.DOM0
    stage_in = transfer_time(
        params,
        job.input_size,
        EndpointKind.PHYSICAL,
        staging,
        n_vm,
        dom0_memory=machine.dom0_memory,
    )
    stage_out = transfer_time(
        params,
        job.output_size,
        staging,
        EndpointKind.PHYSICAL,
        n_vm,
        dom0_memory=machine.dom0_memory,
    )
    return CompletionEstimate(
        t_setup=t_setup,
        t_compute=t_compute,
        t_stage_in=stage_in,
        t_stage_out=stage_out,
        n_parallel=n_vm,
    )
