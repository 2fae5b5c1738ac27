"""Scenario validation, overhead arithmetic and the JSON scenario schema."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

from .exceptions import NonPositiveBaselineError, ScenarioValidationError, Violation
from .types import (
    DOM0_ID,
    DomainConfig,
    HeartbeatPolicy,
    JobSpec,
    MachineSpec,
    PerfParams,
    Scenario,
)

logger = logging.getLogger(__name__)

OVER_COMMIT_MEMORY = "OVER_COMMIT_MEMORY"
BAD_PINNING = "BAD_PINNING"
EMPTY_SCENARIO = "EMPTY_SCENARIO"
INVALID_FIELD = "INVALID_FIELD"
UNREADABLE_SCENARIO = "UNREADABLE_SCENARIO"


def _machine_violations(machine: MachineSpec) -> list[Violation]:
    problems = []
    if machine.pcpus < 1:
        problems.append(
            Violation(INVALID_FIELD, f"machine.pcpus must be >= 1, got {machine.pcpus}")
        )
    if machine.dom0_memory >= machine.total_memory:
        problems.append(
            Violation(
                INVALID_FIELD,
                f"machine.dom0_memory ({machine.dom0_memory}) must be below "
                f"total_memory ({machine.total_memory})",
            )
        )
    if machine.nic_bandwidth <= 0:
        problems.append(Violation(INVALID_FIELD, "machine.nic_bandwidth must be > 0"))
    return problems


def domain_violations(machine: MachineSpec, domains: Sequence[DomainConfig]) -> list[Violation]:
    problems = []
    seen: set[str] = set()
    for dom in domains:
        name = dom.domain_id
        if name == DOM0_ID:
            problems.append(Violation(INVALID_FIELD, f"{name} is reserved for the host domain"))
        if name in seen:
            problems.append(Violation(INVALID_FIELD, f"duplicate domain_id {name!r}"))
        seen.add(name)
        if dom.vcpus < 1:
            problems.append(Violation(INVALID_FIELD, f"{name}: vcpus must be >= 1"))
        if dom.memory <= 0:
            problems.append(Violation(INVALID_FIELD, f"{name}: memory must be > 0"))
        if dom.weight < 1:
            problems.append(Violation(INVALID_FIELD, f"{name}: weight must be >= 1"))
        if not 0 <= dom.cap <= 100 * max(dom.vcpus, 1):
            problems.append(
                Violation(INVALID_FIELD, f"{name}: cap {dom.cap} outside [0, {100 * dom.vcpus}]")
            )
        if dom.pinning is not None:
            if not dom.pinning:
                problems.append(Violation(BAD_PINNING, f"{name}: explicit pinning list is empty"))
            bad = [p for p in dom.pinning if p < 0 or p >= machine.pcpus]
            if bad:
                problems.append(
                    Violation(
                        BAD_PINNING,
                        f"{name}: pinned to pCPU(s) {bad} on a host with {machine.pcpus} pCPUs",
                    )
                )
    return problems


def _job_violations(jobs: Sequence[JobSpec]) -> list[Violation]:
    problems = []
    for job in jobs:
        name = job.job_id
        if job.cpu_work <= 0:
            problems.append(Violation(INVALID_FIELD, f"{name}: cpu_work must be > 0"))
        if job.event_count < 1:
            problems.append(Violation(INVALID_FIELD, f"{name}: event_count must be >= 1"))
        if job.mem_base < 0 or job.mem_per_event < 0:
            problems.append(Violation(INVALID_FIELD, f"{name}: memory figures must be >= 0"))
        if job.input_size < 0 or job.output_size < 0:
            problems.append(Violation(INVALID_FIELD, f"{name}: dataset sizes must be >= 0"))
    return problems


def _policy_violations(heartbeat: HeartbeatPolicy, params: PerfParams) -> list[Violation]:
    problems = []
    if heartbeat.interval <= 0:
        problems.append(Violation(INVALID_FIELD, "heartbeat.interval must be > 0"))
    if heartbeat.miss_threshold < 1:
        problems.append(Violation(INVALID_FIELD, "heartbeat.miss_threshold must be >= 1"))
    if not 0 < heartbeat.sweep_period <= heartbeat.interval:
        problems.append(Violation(INVALID_FIELD, "heartbeat.sweep_period must be in (0, interval]"))
    if params.k_setup_shutdown < 0:
        problems.append(Violation(INVALID_FIELD, "perf_params.k_setup_shutdown must be >= 0"))

    mem = sorted(params.mem_curve)
    if not mem or any(factor < 1.0 for _, factor in mem):
        problems.append(Violation(INVALID_FIELD, "perf_params.mem_curve factors must be >= 1"))
    if any(b[1] > a[1] for a, b in zip(mem, mem[1:])):
        problems.append(
            Violation(INVALID_FIELD, "perf_params.mem_curve must be non-increasing in memory")
        )
    dom0 = sorted(params.dom0_throughput_curve)
    if not dom0 or any(b[1] < a[1] for a, b in zip(dom0, dom0[1:])):
        problems.append(
            Violation(
                INVALID_FIELD, "perf_params.dom0_throughput_curve must be non-decreasing in memory"
            )
        )
    return problems


def validate_scenario(
    machine: MachineSpec,
    domains: Sequence[DomainConfig],
    jobs: Sequence[JobSpec],
    heartbeat: HeartbeatPolicy | None = None,
    perf_params: PerfParams | None = None,
) -> Scenario:
    """Check every type invariant plus host memory commitment.

    Collects all problems before raising, so a caller sees every violated
    constraint at once.

    Returns:
        The validated scenario.

    Raises:
        ScenarioValidationError: listing each violation (OVER_COMMIT_MEMORY,
            BAD_PINNING, EMPTY_SCENARIO, INVALID_FIELD).
    """
    heartbeat = heartbeat or HeartbeatPolicy()
    perf_params = perf_params or PerfParams()
    problems: list[Violation] = []

    if not domains and not jobs:
        problems.append(Violation(EMPTY_SCENARIO, "scenario has no domains and no jobs"))

    problems.extend(_machine_violations(machine))
    problems.extend(domain_violations(machine, domains))
    problems.extend(_job_violations(jobs))
    problems.extend(_policy_violations(heartbeat, perf_params))

    if domains and jobs and len(domains) != len(jobs):
        problems.append(
            Violation(
                INVALID_FIELD,
                f"{len(jobs)} jobs cannot be paired with {len(domains)} domains",
            )
        )

    committed = sum(dom.memory for dom in domains) + machine.dom0_memory
    if committed > machine.total_memory:
        problems.append(
            Violation(
                OVER_COMMIT_MEMORY,
                f"domains plus dom0 need {committed} MiB, host has {machine.total_memory} MiB",
            )
        )

    if problems:
        raise ScenarioValidationError(problems)

    return Scenario(
        machine=machine,
        domains=tuple(domains),
        jobs=tuple(jobs),
        perf_params=perf_params,
        heartbeat=heartbeat,
    )


def overhead_percent(t_measured: float, t_baseline: float) -> float:
    """Relative slowdown of *t_measured* against *t_baseline*, in percent, unrounded."""
    if t_baseline <= 0:
        raise NonPositiveBaselineError(
            f"baseline must be > 0, got {t_baseline}", details={"t_baseline": t_baseline}
        )
    return 100.0 * (t_measured - t_baseline) / t_baseline


def display_overhead(pct: float) -> int:
    """Round an overhead percentage to the nearest integer, halves away from zero."""
    return int(math.copysign(math.floor(abs(pct) + 0.5), pct))


def scenario_from_dict(data: dict) -> Scenario:
    """Build and validate a scenario from its JSON form."""
    try:
        machine = MachineSpec.from_dict(data.get("machine", {}))
        domains = [DomainConfig.from_dict(d) for d in data.get("domains", [])]
        jobs = [JobSpec.from_dict(j, index=i) for i, j in enumerate(data.get("jobs", []))]
        heartbeat = HeartbeatPolicy.from_dict(data.get("heartbeat", {}))
        params = PerfParams.from_dict(data.get("perf_params", {}))
        baseline = data.get("baseline_s")
        extras = {
            "conf_id": str(data.get("conf_id", "scenario")),
            "baseline_s": None if baseline is None else float(baseline),
            "image_id": str(data.get("image_id", "slc4")),
            "volume_size": float(data.get("volume_size", 10.0)),
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioValidationError(
            [Violation(INVALID_FIELD, f"malformed scenario field: {exc!r}")]
        ) from exc

    scenario = validate_scenario(machine, domains, jobs, heartbeat=heartbeat, perf_params=params)
    return replace(scenario, **extras)


def load_scenario(path: Path | str) -> Scenario:
    """Read and validate a scenario JSON file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ScenarioValidationError(
            [Violation(UNREADABLE_SCENARIO, f"cannot read {path}: {exc}")]
        ) from exc
    except json.JSONDecodeError as exc:
        raise ScenarioValidationError(
            [Violation(INVALID_FIELD, f"{path} is not valid JSON: {exc}")]
        ) from exc
    if not isinstance(data, dict):
        raise ScenarioValidationError(
            [Violation(INVALID_FIELD, f"{path}: top level must be an object")]
        )

    scenario = scenario_from_dict(data)
    logger.debug(
        "Loaded scenario %s (%d domains, %d jobs) from %s",
        scenario.conf_id,
        len(scenario.domains),
        len(scenario.jobs),
        path,
    )
    return scenario


def dump_scenario(scenario: Scenario, path: Path | str) -> Path:
    """Write *scenario* as JSON; the output round-trips through load_scenario."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scenario.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path
