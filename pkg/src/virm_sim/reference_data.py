"""Published measurements the model is calibrated and checked against.

Only the configurations with published numbers ship as named scenarios.
"""

from __future__ import annotations

from dataclasses import dataclass

from .types import (
    DomainConfig,
    EndpointKind,
    HeartbeatPolicy,
    JobSpec,
    MachineSpec,
    PerfParams,
    Scenario,
)

BASELINE_CONF = "Conf_1"
DATASET_GB = 3.0
DEFAULT_IMAGE = "slc4"


@dataclass(frozen=True)
class CompletionTarget:
    """A measured job completion time for ``n_vm`` identical domains.

    ``domain`` is the per-VM template; None marks the bare-metal baseline.
    """

    conf_id: str
    n_vm: int
    cpus_per_vm: float
    t_paper: float
    domain: DomainConfig | None = None

    @property
    def is_baseline(self) -> bool:
        return self.n_vm == 0

    def domains(self) -> tuple[DomainConfig, ...]:
        if self.domain is None:
            return ()
        return tuple(
            DomainConfig(
                domain_id=f"dom{i + 1}",
                vcpus=self.domain.vcpus,
                memory=self.domain.memory,
                weight=self.domain.weight,
                cap=self.domain.cap,
                pinning=self.domain.pinning,
            )
            for i in range(self.n_vm)
        )


COMPLETION_TARGETS: tuple[CompletionTarget, ...] = (
    CompletionTarget("Conf_1", 0, 4, 7080.0),
    CompletionTarget("Conf_2", 1, 4, 7130.0, DomainConfig("dom", vcpus=4, memory=2048)),
    CompletionTarget("Conf_5", 2, 2, 7193.0, DomainConfig("dom", vcpus=2, memory=2048)),
    CompletionTarget("Conf_9", 3, 1, 7970.0, DomainConfig("dom", vcpus=1, memory=2048)),
    CompletionTarget(
        "Conf_10.1", 3, 0.5, 12926.0, DomainConfig("dom", vcpus=1, memory=2048, cap=50)
    ),
)


def completion_target(conf_id: str) -> CompletionTarget:
    for target in COMPLETION_TARGETS:
        if target.conf_id == conf_id:
            return target
    known = ", ".join(t.conf_id for t in COMPLETION_TARGETS)
    raise KeyError(f"unknown configuration {conf_id!r}; known: {known}")


@dataclass(frozen=True)
class ThroughputRow:
    """A measured 3 GB transfer: parallel domains, endpoints and Mb/s."""

    label: str
    n_parallel: int
    src: EndpointKind
    dst: EndpointKind
    mbps: float
    trial: int = 0


THROUGHPUT_ROWS: tuple[ThroughputRow, ...] = (
    ThroughputRow("Physical-to-Physical", 0, EndpointKind.PHYSICAL, EndpointKind.PHYSICAL, 62.8),
    ThroughputRow("Physical-to-Virtual", 0, EndpointKind.PHYSICAL, EndpointKind.VIRTUAL, 8.8),
    ThroughputRow("Physical-to-Virtual", 3, EndpointKind.PHYSICAL, EndpointKind.VIRTUAL, 8.3),
    ThroughputRow("Virtual-to-Virtual", 3, EndpointKind.VIRTUAL, EndpointKind.VIRTUAL, 6.4),
    ThroughputRow("Virtual-to-Virtual", 3, EndpointKind.VIRTUAL, EndpointKind.VIRTUAL, 6.6, 1),
)


def reference_job(params: PerfParams, job_id: str = "job-0") -> JobSpec:
    """The reconstruction payload used by every named configuration."""
    return JobSpec(
        cpu_work=params.reference_cpu_work,
        event_count=1000,
        mem_base=1024.0,
        mem_per_event=0.0,
        input_size=DATASET_GB,
        output_size=1.0,
        job_id=job_id,
    )


def conf_scenario(
    conf_id: str,
    params: PerfParams | None = None,
    machine: MachineSpec | None = None,
    heartbeat: HeartbeatPolicy | None = None,
) -> Scenario:
    """Named scenario for a published configuration.

    The bare-metal baseline runs one job with no domains; every other
    configuration pairs one reference job with each domain.
    """
    params = params or PerfParams()
    machine = machine or MachineSpec()
    target = completion_target(conf_id)
    domains = target.domains()
    n_jobs = max(len(domains), 1)
    jobs = tuple(reference_job(params, f"{conf_id}-job{i + 1}") for i in range(n_jobs))
    baseline = completion_target(BASELINE_CONF).t_paper
    return Scenario(
        machine=machine,
        domains=domains,
        jobs=jobs,
        perf_params=params,
        heartbeat=heartbeat or HeartbeatPolicy(),
        conf_id=conf_id,
        baseline_s=baseline,
        image_id=DEFAULT_IMAGE,
    )
