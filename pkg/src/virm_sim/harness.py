"""Scenario runner and experiment replays on one virtual clock.

:func:`simulate` is a small discrete-event loop: every pilot is a generator that
yields how long it wants to wait, the loop keeps a heap of wake-up times, and
the VIRM service clock is advanced to each wake-up in turn (which also runs
lease sweeps and the simulated hypervisor). Nothing sleeps in real time.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import multiprocessing as mp
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .calibration import calibrate
from .callbacks import (
    HeartbeatEvent,
    LoggingCallback,
    NullCallback,
    PhaseEvent,
    ProgressEvent,
    SimulationCallback,
)
from .client import LocalVirmClient
from .clock import VirtualClock
from .engine import SimulatedEngine
from .exceptions import IOFailedError, NonPositiveBaselineError
from .perf_model import completion_estimate, direct_seconds, dom0_throughput, transfer_time
from .pilot import Pilot, PilotConfig, PilotReport
from .reference_data import (
    BASELINE_CONF,
    COMPLETION_TARGETS,
    DATASET_GB,
    THROUGHPUT_ROWS,
    completion_target,
    conf_scenario,
    reference_job,
)
from .scenario import dump_scenario, load_scenario, overhead_percent, validate_scenario
from .scheduler import CreditScheduler, LoadPattern
from .service import VirmService
from .share_cache import ShareSampler
from .types import (
    DOM0_ID,
    DomainConfig,
    EndpointKind,
    JobSpec,
    MachineSpec,
    MetricsRecord,
    PerfParams,
    Scenario,
)

logger = logging.getLogger(__name__)

METRICS_HEADER = ("conf_id", "t_total_s", "overhead_pct", "cpu_share_avg", "heartbeats_sent")


@dataclass
class HarnessConfig:
    """Knobs of the simulation harness."""

    share_warmup: float = 0.3
    share_window: float = 3.0

    def sampler(self) -> ShareSampler:
        if (self.share_warmup, self.share_window) == (0.3, 3.0):
            return ShareSampler.get_instance()
        return ShareSampler(warmup=self.share_warmup, window=self.share_window)


@dataclass(frozen=True)
class TraceEvent:
    ts: float
    pilot_id: str
    kind: str
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ts": self.ts, "pilot_id": self.pilot_id, "kind": self.kind, **self.detail}


@dataclass
class ScenarioRun:
    """A finished scenario: metrics per pilot plus the ordered event trace."""

    scenario: Scenario
    pilots: list[tuple[JobSpec, DomainConfig | None]]
    clock: float
    metrics: list[MetricsRecord]
    trace: list[TraceEvent]
    reports: list[PilotReport]
    service: VirmService | None = None


class _TraceRecorder:
    """SimulationCallback that appends to the trace and forwards to another callback."""

    def __init__(self, trace: list[TraceEvent], forward: SimulationCallback) -> None:
        self._trace = trace
        self._forward = forward

    def on_phase(self, event: PhaseEvent) -> None:
        kind = "transfer" if event.data else "phase"
        detail = {"phase": event.phase, "detail": event.detail, **event.data}
        self._trace.append(TraceEvent(event.timestamp, event.pilot_id, kind, detail))
        self._forward.on_phase(event)

    def on_heartbeat(self, event: HeartbeatEvent) -> None:
        detail = {"workspace_id": event.workspace_id, "expires_at": event.expires_at}
        self._trace.append(TraceEvent(event.timestamp, event.pilot_id, "heartbeat", detail))
        self._forward.on_heartbeat(event)

    def on_progress(self, event: ProgressEvent) -> None:
        self._forward.on_progress(event)


def _metrics_for(scenario: Scenario, report: PilotReport, job: JobSpec) -> MetricsRecord:
    baseline = scenario.baseline_s
    if baseline is None:
        baseline = direct_seconds(scenario.perf_params, job, scenario.machine)
    try:
        overhead = overhead_percent(report.t_job, baseline)
    except NonPositiveBaselineError:
        logger.warning(
            "%s: baseline %.3f s is not positive, overhead set to 0", job.job_id, baseline
        )
        overhead = 0.0
    return MetricsRecord(
        conf_id=scenario.conf_id,
        pilot_id=report.pilot_id,
        status=report.status,
        t_total=report.t_total,
        t_job=report.t_job,
        overhead_pct=overhead,
        cpu_share_avg=report.result.cpu_share_avg if report.result else 0.0,
        heartbeats_sent=len(report.heartbeats),
        t_stage_in=report.t_stage_in,
        t_stage_out=report.t_stage_out,
        transfers=list(report.transfers),
        error=report.error,
    )


def simulate(
    scenario: Scenario,
    callback: SimulationCallback | None = None,
    config: HarnessConfig | None = None,
) -> ScenarioRun:
    """Run every pilot of *scenario* concurrently on one virtual clock.

    Pilot failures are recorded per pilot; the run itself always completes.

    Raises:
        ScenarioValidationError: if the scenario is invalid.
    """
    config = config or HarnessConfig()
    validate_scenario(
        scenario.machine, scenario.domains, scenario.jobs, scenario.heartbeat,
        scenario.perf_params,
    )
    forward = callback or LoggingCallback()
    trace: list[TraceEvent] = []
    recorder = _TraceRecorder(trace, forward)
    clock = VirtualClock()

    service: VirmService | None = None
    if scenario.domains:
        engine = SimulatedEngine(
            scenario.machine, scenario.perf_params, clock, sampler=config.sampler()
        )
        service = VirmService(
            scenario.machine, scenario.perf_params, scenario.heartbeat,
            clock=clock, engine=engine,
        )

    pilots: list[tuple[JobSpec, DomainConfig | None]] = []
    generators = []
    for i, job in enumerate(scenario.jobs):
        domain = scenario.domains[i] if i < len(scenario.domains) else None
        pilot_id = f"pilot-{i + 1}"
        client = None
        if service is not None and domain is not None:
            client = LocalVirmClient(service, on_call=_call_recorder(trace, clock, pilot_id))
        pilot = Pilot(
            job,
            domain,
            client=client,
            clock=clock,
            machine=scenario.machine,
            params=scenario.perf_params,
            heartbeat=scenario.heartbeat,
            config=PilotConfig(image_id=scenario.image_id, volume_size=scenario.volume_size),
            pilot_id=pilot_id,
            callback=recorder,
        )
        pilots.append((job, domain))
        generators.append(pilot.run())

    logger.info(
        "Simulating %s: %d pilots, %d domains", scenario.conf_id, len(pilots), len(scenario.domains)
    )

    # (wake time, insertion order, pilot index); ties resolve in launch order.
    heap = [(0.0, i, i) for i in range(len(generators))]
    heapq.heapify(heap)
    seq = len(generators)
    reports: list[PilotReport | None] = [None] * len(generators)
    done = 0
    while heap:
        t, _, idx = heapq.heappop(heap)
        if t > clock.now():
            if service is not None:
                service.advance_clock_to(t)
            else:
                clock.advance_to(t)
        try:
            wait = generators[idx].send(None)
        except StopIteration as stop:
            reports[idx] = stop.value
            done += 1
            forward.on_progress(ProgressEvent(scenario.conf_id, done, len(generators)))
            continue
        heapq.heappush(heap, (clock.now() + wait, seq, idx))
        seq += 1

    metrics = [
        _metrics_for(scenario, report, job)
        for report, (job, _) in zip(reports, pilots, strict=True)
    ]
    return ScenarioRun(
        scenario=scenario,
        pilots=pilots,
        clock=clock.now(),
        metrics=metrics,
        trace=trace,
        reports=list(reports),
        service=service,
    )


def _call_recorder(trace: list[TraceEvent], clock: VirtualClock, pilot_id: str):
    def on_call(method: str, target: str) -> None:
        trace.append(
            TraceEvent(clock.now(), pilot_id, "virm_call", {"method": method, "target": target})
        )

    return on_call


def run_scenario(
    path: Path | str,
    callback: SimulationCallback | None = None,
    config: HarnessConfig | None = None,
) -> ScenarioRun:
    """Load, validate and simulate a scenario file."""
    return simulate(load_scenario(path), callback, config)


def metrics_csv(run: ScenarioRun) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for m in run.metrics:
        writer.writerow(
            (
                m.conf_id,
                f"{m.t_total:.3f}",
                f"{m.overhead_pct:.3f}",
                f"{m.cpu_share_avg:.4f}",
                m.heartbeats_sent,
            )
        )
    return buf.getvalue()


def trace_jsonl(run: ScenarioRun) -> str:
    return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in run.trace)


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFailedError(f"cannot write {path}: {exc}", path=str(path)) from exc


def emit_metrics(
    run: ScenarioRun, path: Path | str, trace_path: Path | str | None = None
) -> Path:
    """Write the per-pilot metrics CSV and, optionally, the trace as JSON-lines.

    Raises:
        IOFailedError: if either file cannot be written.
    """
    path = Path(path)
    _write(path, metrics_csv(run))
    if trace_path is not None:
        _write(Path(trace_path), trace_jsonl(run))
    logger.info("Wrote %d metrics rows to %s", len(run.metrics), path)
    return path


def scenario_filename(conf_id: str) -> str:
    """File name for a named configuration: ``Conf_10.1`` becomes ``conf_10_1.json``."""
    return conf_id.lower().replace(".", "_") + ".json"


def export_scenarios(
    out_dir: Path | str,
    conf_ids: list[str] | None = None,
    params: PerfParams | None = None,
    machine: MachineSpec | None = None,
) -> list[Path]:
    """Write the scenario JSON of each named configuration into *out_dir*.

    Every published configuration is written when *conf_ids* is None. The files
    load with :func:`run_scenario` and simulate exactly as the table1 replay does.

    Raises:
        KeyError: for an unknown configuration.
        IOFailedError: if a file cannot be written.
    """
    out_dir = Path(out_dir)
    conf_ids = conf_ids or [t.conf_id for t in COMPLETION_TARGETS]
    scenarios = [conf_scenario(c, params, machine) for c in conf_ids]
    paths = []
    for scenario in scenarios:
        path = out_dir / scenario_filename(scenario.conf_id)
        try:
            dump_scenario(scenario, path)
        except OSError as exc:
            raise IOFailedError(f"cannot write {path}: {exc}", path=str(path)) from exc
        paths.append(path)
    logger.info("Exported %d scenarios to %s", len(paths), out_dir)
    return paths


# ---------------------------------------------------------------------------
# Replays
# ---------------------------------------------------------------------------


@dataclass
class ReplayReport:
    """Rows of one replayed experiment, keyed by their first column."""

    name: str
    header: tuple[str, ...]
    rows: list[dict]
    notes: list[str] = field(default_factory=list)

    def row(self, key: str) -> dict:
        first = self.header[0]
        for row in self.rows:
            if str(row[first]) == key:
                return row
        raise KeyError(f"{self.name} has no row {key!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        for row in self.rows:
            writer.writerow(
                f"{row[col]:.4f}" if isinstance(row[col], float) else row[col]
                for col in self.header
            )
        return buf.getvalue()

    def write_csv(self, path: Path | str) -> Path:
        path = Path(path)
        _write(path, self.to_csv())
        return path


def _conf_times(
    conf_id: str, params: PerfParams, machine: MachineSpec | None
) -> tuple[float, float]:
    """Mean (t_job, t_total) over the pilots of a named configuration."""
    run = simulate(conf_scenario(conf_id, params, machine), callback=NullCallback())
    return (
        statistics.fmean(m.t_job for m in run.metrics),
        statistics.fmean(m.t_total for m in run.metrics),
    )


def replay_table1(
    params: PerfParams | None = None,
    *,
    machine: MachineSpec | None = None,
    workers: int = 1,
    log_queue: mp.Queue | None = None,
    callback: SimulationCallback | None = None,
) -> ReplayReport:
    """Simulate every published completion-time configuration and compare.

    Calibrates first when *params* is None. With ``workers > 1`` the
    configurations run in a process pool; pass the queue from
    :func:`setup_main_logging` to collect worker logs.
    """
    cb = callback or LoggingCallback()
    if params is None:
        params = calibrate(machine=machine).params
    conf_ids = [t.conf_id for t in COMPLETION_TARGETS]

    if workers > 1:
        from .logging_ import worker_log_initializer

        kwargs = {}
        if log_queue is not None:
            kwargs = {"initializer": worker_log_initializer, "initargs": (log_queue,)}
        with ProcessPoolExecutor(max_workers=workers, **kwargs) as executor:
            futures = [executor.submit(_conf_times, c, params, machine) for c in conf_ids]
            times = []
            for i, future in enumerate(futures, 1):
                times.append(future.result())
                cb.on_progress(ProgressEvent("table1", i, len(conf_ids)))
    else:
        times = []
        for i, conf_id in enumerate(conf_ids, 1):
            times.append(_conf_times(conf_id, params, machine))
            cb.on_progress(ProgressEvent("table1", i, len(conf_ids)))

    baseline = completion_target(BASELINE_CONF).t_paper
    rows = []
    for conf_id, (t_job, t_total) in zip(conf_ids, times, strict=True):
        target = completion_target(conf_id)
        t_paper = target.t_paper
        domains = target.domains()
        estimate = completion_estimate(
            params,
            domains[0] if domains else None,
            reference_job(params),
            len(domains),
            machine=machine,
        )
        rows.append(
            {
                "conf_id": conf_id,
                "t_paper": t_paper,
                "t_model": t_job,
                "residual_pct": 100.0 * (t_job - t_paper) / t_paper,
                "overhead_pct": overhead_percent(t_job, baseline),
                "t_total": t_total,
                "t_estimate": estimate.t_total,
            }
        )
    return ReplayReport(
        "table1",
        (
            "conf_id", "t_paper", "t_model", "residual_pct", "overhead_pct", "t_total",
            "t_estimate",
        ),
        rows,
        notes=[
            "t_model is setup/shutdown plus compute; t_total adds staging",
            "t_estimate is the closed-form total at nominal shares",
        ],
    )


def replay_table2(params: PerfParams | None = None) -> ReplayReport:
    """3 GB transfer time and read-back throughput for each measured row."""
    params = params or PerfParams()
    size_mb = DATASET_GB * 8192
    rows = []
    for row in THROUGHPUT_ROWS:
        seconds = transfer_time(
            params, DATASET_GB, row.src, row.dst, row.n_parallel, trial=row.trial
        )
        rows.append(
            {
                "label": row.label,
                "n_parallel": row.n_parallel,
                "trial": row.trial,
                "mbps_measured": row.mbps,
                "t_model_s": seconds,
                "mbps_model": size_mb / seconds,
            }
        )
    return ReplayReport(
        "table2", ("label", "n_parallel", "trial", "mbps_measured", "t_model_s", "mbps_model"), rows
    )


def _useful_cpu(machine: MachineSpec, domains: list[DomainConfig], seconds: float) -> dict:
    sched = CreditScheduler(machine)
    sched.add_domain(domains[0], LoadPattern.cpu_bound())
    sched.add_domain(domains[1], LoadPattern.intermittent(busy_ms=50, idle_ms=50))
    sched.run_until(seconds)
    return {d.domain_id: sched.domain_cpu_time(d.domain_id) for d in domains}


def replay_pinning(machine: MachineSpec | None = None, seconds: float = 60.0) -> ReplayReport:
    """Two domains on two pCPUs, one CPU-bound and one intermittent, pinned 1:1 vs fair share."""
    machine = replace(machine or MachineSpec(), pcpus=2)
    rows = []
    for placement, pins in (("pinned", ((0,), (1,))), ("fair_share", (None, None))):
        domains = [
            DomainConfig("busy", vcpus=2, memory=1024, pinning=pins[0]),
            DomainConfig("bursty", vcpus=2, memory=1024, pinning=pins[1]),
        ]
        used = _useful_cpu(machine, domains, seconds)
        rows.append(
            {
                "placement": placement,
                "cpu_busy_s": used["busy"],
                "cpu_bursty_s": used["bursty"],
                "cpu_total_s": used["busy"] + used["bursty"],
            }
        )
    return ReplayReport(
        "pinning", ("placement", "cpu_busy_s", "cpu_bursty_s", "cpu_total_s"), rows
    )


def replay_weights(
    weights: tuple[int, ...] = (512, 1024), seconds: float = 60.0
) -> ReplayReport:
    """One guest against a saturated Dom_0 on one pCPU, at several weights."""
    machine = MachineSpec(pcpus=1)
    rows = []
    for weight in weights:
        sched = CreditScheduler(machine)
        sched.add_domain(DomainConfig("guest", vcpus=1, memory=1024, weight=weight))
        sched.submit_dom0_work(seconds * 1000.0 * machine.pcpus)
        sched.run_until(seconds)
        guest = sched.domain_cpu_time("guest")
        dom0 = sched.domain_cpu_time(DOM0_ID)
        rows.append(
            {
                "weight": weight,
                "weight_ratio": weight / 256,
                "guest_cpu_s": guest,
                "dom0_cpu_s": dom0,
                "cpu_ratio": guest / dom0 if dom0 else float("inf"),
            }
        )
    return ReplayReport(
        "weights", ("weight", "weight_ratio", "guest_cpu_s", "dom0_cpu_s", "cpu_ratio"), rows
    )


def replay_memory(
    params: PerfParams | None = None,
    memories: tuple[int, ...] = (8192, 7168, 6144, 3072),
    machine: MachineSpec | None = None,
) -> ReplayReport:
    """One full-host domain at each memory size."""
    params = params or PerfParams()
    machine = machine or MachineSpec()
    machine = replace(
        machine, total_memory=max(machine.total_memory, max(memories) + machine.dom0_memory)
    )
    rows = []
    for memory in memories:
        scenario = Scenario(
            machine=machine,
            domains=(DomainConfig("dom1", vcpus=machine.pcpus, memory=memory),),
            jobs=(reference_job(params, f"mem{memory}-job1"),),
            perf_params=params,
            conf_id=f"mem{memory}",
            baseline_s=completion_target(BASELINE_CONF).t_paper,
        )
        run = simulate(scenario, callback=NullCallback())
        rows.append(
            {"memory": memory, "t_job": run.metrics[0].t_job, "t_total": run.metrics[0].t_total}
        )
    spread = max(r["t_job"] for r in rows) - min(r["t_job"] for r in rows)
    return ReplayReport(
        "memory", ("memory", "t_job", "t_total"), rows, notes=[f"spread {spread:.1f} s"]
    )


def replay_dom0(
    params: PerfParams | None = None, memories: tuple[int, ...] = (512, 1024, 2048)
) -> ReplayReport:
    """Dom_0 proxy throughput and 3 GB stage-in time per Dom_0 memory size."""
    params = params or PerfParams()
    rows = [
        {
            "dom0_memory": memory,
            "mbps": dom0_throughput(params, memory),
            "stage_in_s": transfer_time(
                params, DATASET_GB, EndpointKind.PHYSICAL, EndpointKind.DOM0, 0,
                dom0_memory=memory,
            ),
        }
        for memory in memories
    ]
    return ReplayReport("dom0", ("dom0_memory", "mbps", "stage_in_s"), rows)


def replay_balloon(
    params: PerfParams | None = None, machine: MachineSpec | None = None
) -> ReplayReport:
    """Memory-growth job in a 1-vCPU domain, capped at 50% and uncapped."""
    params = params or PerfParams()
    machine = machine or MachineSpec()
    rows = []
    for label, cap in (("cap50", 50), ("uncapped", 0)):
        job = JobSpec(
            cpu_work=params.reference_cpu_work / machine.pcpus,
            event_count=1000,
            mem_base=1536.0,
            mem_per_event=1.0,
            job_id=f"balloon-{label}",
        )
        scenario = Scenario(
            machine=machine,
            domains=(DomainConfig("dom1", vcpus=1, memory=2048, cap=cap),),
            jobs=(job,),
            perf_params=params,
            conf_id=f"balloon-{label}",
        )
        run = simulate(scenario, callback=NullCallback())
        report = run.reports[0]
        latencies = report.result.grant_latencies if report.result else []
        rows.append(
            {
                "placement": label,
                "status": str(report.status),
                "grants": len(latencies),
                "mean_latency_s": statistics.fmean(latencies) if latencies else 0.0,
                "max_latency_s": max(latencies, default=0.0),
                "t_job": report.t_job,
            }
        )
    return ReplayReport(
        "balloon",
        ("placement", "status", "grants", "mean_latency_s", "max_latency_s", "t_job"),
        rows,
    )


REPLAYS = {
    "table1": replay_table1,
    "table2": replay_table2,
    "pinning": replay_pinning,
    "weights": replay_weights,
    "memory": replay_memory,
    "dom0": replay_dom0,
    "balloon": replay_balloon,
}

