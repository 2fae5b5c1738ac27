"""Pilot agent: detect VIRM, stage data through the host, run the payload, report.

A pilot is a generator. Each ``yield`` hands back the virtual seconds it wants
to wait; whoever drives it (the harness event loop or :func:`drive`) advances
the shared clock and resumes it. The generator's return value is the
:class:`PilotReport`.

Staging always goes through Dom_0 or the physical host, never a guest NIC.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Generator
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Protocol

from .callbacks import HeartbeatEvent, NullCallback, PhaseEvent, SimulationCallback
from .client import DEFAULT_URL, HttpVirmClient, VirmClient, valid_identity
from .engine import JOB_FILE, JobStatus
from .exceptions import (
    HeartbeatRejectedError,
    JobFailedError,
    PerfModelError,
    PilotError,
    TransferFailedError,
    UnknownWorkspaceError,
    VirmError,
    WorkdirUnwritableError,
)
from .perf_model import ERROR_LOG_BUNDLE_GB, direct_seconds, transfer_time
from .types import (
    DomainConfig,
    EndpointKind,
    HeartbeatPolicy,
    JobSpec,
    JobState,
    MachineSpec,
    PerfParams,
    PilotMode,
    PilotPhase,
    TransferRecord,
    WorkspaceState,
)

logger = logging.getLogger(__name__)

MANIFEST_FILE = "env_manifest.json"
_MIN_WAIT = 1e-3
_SLACK = 1e-9


class ClockView(Protocol):
    def now(self) -> float: ...


@dataclass
class PilotConfig:
    """Pilot knobs; defaults match a pilot on the VIRM host."""

    virm_url: str = DEFAULT_URL
    probe_timeout: float = 2.0
    status_interval: float = 300.0
    teardown_retries: int = 3
    workdir: Path | None = None
    force_direct: bool = False
    image_id: str = "slc4"
    volume_size: float = 10.0


@dataclass(frozen=True)
class StatusEntry:
    ts: float
    phase: PilotPhase
    detail: str = ""

    def to_dict(self) -> dict:
        return {"ts": self.ts, "phase": str(self.phase), "detail": self.detail}


@dataclass
class PilotState:
    job: JobSpec
    phase: PilotPhase = PilotPhase.INIT
    mode: PilotMode = PilotMode.DIRECT
    workspace_id: str | None = None
    status_log: list[StatusEntry] = field(default_factory=list)


@dataclass
class JobResult:
    """What the payload did, however it ended."""

    state: JobState
    exit_code: int
    events_processed: int
    started_at: float
    finished_at: float
    cpu_share_avg: float = 0.0
    error: str | None = None
    grant_latencies: list[float] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return self.finished_at - self.started_at


@dataclass
class PilotReport:
    pilot_id: str
    state: PilotState
    result: JobResult | None
    t_start: float
    t_end: float
    t_setup: float = 0.0
    t_teardown: float = 0.0
    t_stage_in: float = 0.0
    t_stage_out: float = 0.0
    heartbeats: list[float] = field(default_factory=list)
    status_updates: list[float] = field(default_factory=list)
    transfers: list[TransferRecord] = field(default_factory=list)
    manifest: dict | None = None
    error: str | None = None

    @property
    def status(self) -> PilotPhase:
        return self.state.phase

    @property
    def t_total(self) -> float:
        return self.t_end - self.t_start

    @property
    def t_job(self) -> float:
        """Sandbox setup, payload run and teardown; directly comparable across modes."""
        run = self.result.duration if self.result else 0.0
        return self.t_setup + run + self.t_teardown

    def write_status_log(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(e.to_dict(), sort_keys=True) for e in self.state.status_log]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# Phase operations
# ---------------------------------------------------------------------------


def detect_virm(endpoint: VirmClient | str | None, timeout: float = 2.0) -> PilotMode:
    """VIRTUALIZED iff the endpoint answers with a well-formed identity. Never raises."""
    if endpoint is None:
        return PilotMode.DIRECT
    try:
        if isinstance(endpoint, str):
            with HttpVirmClient(endpoint, timeout=timeout) as client:
                body = client.identity()
        else:
            body = endpoint.identity()
    except Exception as exc:  # noqa: BLE001
        logger.debug("VIRM probe failed: %s", exc)
        return PilotMode.DIRECT
    if not valid_identity(body):
        logger.debug("VIRM probe got a malformed identity: %r", body)
        return PilotMode.DIRECT
    return PilotMode.VIRTUALIZED


def prepare_env(
    job: JobSpec, workdir: Path | None = None, mode: PilotMode = PilotMode.DIRECT
) -> dict:
    """Environment manifest for *job*; creates the directory layout if *workdir* is set.

    The manifest depends only on its arguments.

    Raises:
        WorkdirUnwritableError: if the layout or manifest cannot be written.
    """
    root = (Path(workdir) if workdir else PurePosixPath("/virm/work")) / job.job_id
    layout = {name: str(root / name) for name in ("input", "output", "logs")}
    manifest = {
        "job_id": job.job_id,
        "mode": str(mode),
        "workdir": str(root),
        "layout": layout,
        "variables": {
            "VIRM_JOB_ID": job.job_id,
            "VIRM_WORKDIR": str(root),
            "VIRM_EVENTS": str(job.event_count),
            "VIRM_INPUT_GB": f"{job.input_size:g}",
            "VIRM_MODE": str(mode),
        },
    }
    if workdir is not None:
        try:
            for path in layout.values():
                Path(path).mkdir(parents=True, exist_ok=True)
            (Path(root) / MANIFEST_FILE).write_text(
                json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
        except OSError as exc:
            raise WorkdirUnwritableError(
                f"cannot prepare {root}: {exc}", details={"workdir": str(root)}
            ) from exc
    return manifest


def _staging_endpoints(mode: PilotMode, inbound: bool) -> tuple[EndpointKind, EndpointKind]:
    if mode == PilotMode.DIRECT:
        return EndpointKind.PHYSICAL, EndpointKind.PHYSICAL
    if inbound:
        return EndpointKind.PHYSICAL, EndpointKind.DOM0
    return EndpointKind.DOM0, EndpointKind.PHYSICAL


def _transfer(
    params: PerfParams, machine: MachineSpec, size: float, mode: PilotMode, inbound: bool
) -> TransferRecord:
    src, dst = _staging_endpoints(mode, inbound)
    try:
        seconds = transfer_time(params, size, src, dst, 0, dom0_memory=machine.dom0_memory)
    except (PerfModelError, ValueError) as exc:
        raise TransferFailedError(f"{size} GB {src}->{dst} failed: {exc}") from exc
    return TransferRecord(size_gb=size, src=src, dst=dst, seconds=seconds)


def stage_in(
    params: PerfParams, machine: MachineSpec, job: JobSpec, mode: PilotMode
) -> TransferRecord:
    """Download the input dataset to the host-visible staging area."""
    return _transfer(params, machine, job.input_size, mode, inbound=True)


def stage_out(
    params: PerfParams, machine: MachineSpec, job: JobSpec, success: bool, mode: PilotMode
) -> TransferRecord:
    """Upload the output on success, otherwise only the error-log bundle."""
    size = job.output_size if success else ERROR_LOG_BUNDLE_GB
    return _transfer(params, machine, size, mode, inbound=False)


# ---------------------------------------------------------------------------
# Pilot
# ---------------------------------------------------------------------------


class Pilot:
    """One pilot running one job, in a sandbox when VIRM answers.

    Args:
        job: The payload.
        domain: Sandbox sizing; None forces DIRECT mode.
        client: VIRM client; None forces DIRECT mode.
        clock: Virtual clock the driver advances.
    """

    def __init__(
        self,
        job: JobSpec,
        domain: DomainConfig | None = None,
        *,
        client: VirmClient | None = None,
        clock: ClockView,
        machine: MachineSpec | None = None,
        params: PerfParams | None = None,
        heartbeat: HeartbeatPolicy | None = None,
        config: PilotConfig | None = None,
        pilot_id: str | None = None,
        callback: SimulationCallback | None = None,
    ) -> None:
        self.job = job
        self.domain = domain
        self.client = client
        self.clock = clock
        self.machine = machine or MachineSpec()
        self.params = params or PerfParams()
        self.policy = heartbeat or HeartbeatPolicy()
        self.config = config or PilotConfig()
        self.pilot_id = pilot_id or job.job_id
        self.callback = callback or NullCallback()
        self.state = PilotState(job=job)
        self._report = PilotReport(self.pilot_id, self.state, None, 0.0, 0.0)

    def _log(self, phase: PilotPhase, detail: str = "", data: dict | None = None) -> None:
        ts = self.clock.now()
        self.state.phase = phase
        self.state.status_log.append(StatusEntry(ts, phase, detail))
        self.callback.on_phase(PhaseEvent(self.pilot_id, str(phase), ts, detail, data or {}))

    def _record_transfer(self, phase: PilotPhase, record: TransferRecord) -> None:
        self._report.transfers.append(record)
        self._log(
            phase,
            f"transfer {record.size_gb:g} GB {record.src}->{record.dst} in {record.seconds:.2f} s",
            record.to_dict(),
        )

    def run(self) -> Generator[float, None, PilotReport]:
        report = self._report
        report.t_start = self.clock.now()
        self._log(PilotPhase.INIT, f"job {self.job.job_id}")

        self._log(PilotPhase.DETECT)
        if self.config.force_direct or self.domain is None or self.client is None:
            mode = PilotMode.DIRECT
        else:
            mode = detect_virm(self.client, self.config.probe_timeout)
        self.state.mode = mode
        self._log(PilotPhase.DETECT, f"mode {mode}")

        ok = True
        try:
            self._log(PilotPhase.PREPARE_ENV)
            report.manifest = prepare_env(self.job, self.config.workdir, mode)
            self._log(PilotPhase.PREPARE_ENV, f"workdir {report.manifest['workdir']}")

            self._log(PilotPhase.STAGE_IN)
            record = stage_in(self.params, self.machine, self.job, mode)
            self._record_transfer(PilotPhase.STAGE_IN, record)
            report.t_stage_in = record.seconds
            if record.seconds > 0:
                yield record.seconds
            self._log(PilotPhase.STAGE_IN, "input staged")

            if mode == PilotMode.VIRTUALIZED:
                ok = yield from self._run_virtualized()
            else:
                yield from self.run_job()
        except PilotError as exc:
            ok = False
            report.error = str(exc)
            self._log(self.state.phase, f"error: {exc}")

        self._log(PilotPhase.STAGE_OUT)
        try:
            record = stage_out(self.params, self.machine, self.job, ok, mode)
            self._record_transfer(PilotPhase.STAGE_OUT, record)
            report.t_stage_out = record.seconds
            if record.seconds > 0:
                yield record.seconds
        except TransferFailedError as exc:
            ok = False
            report.error = report.error or str(exc)
            self._log(PilotPhase.STAGE_OUT, f"error: {exc}")

        self._log(PilotPhase.DONE if ok else PilotPhase.FAILED)
        report.t_end = self.clock.now()
        logger.info(
            "Pilot %s %s after %.1f s (%s)",
            self.pilot_id, self.state.phase, report.t_total, mode,
        )
        return report

    def run_job(self, ws: str | None = None) -> Generator[float, None, None]:
        """Run the payload on the host, or inside the running sandbox *ws*.

        Raises:
            JobFailedError: if the sandboxed payload fails or stops reporting.
            HeartbeatRejectedError: if VIRM refuses a heartbeat.
        """
        self._log(PilotPhase.RUN_JOB)
        if ws is None:
            yield from self._run_direct()
        else:
            yield from self._run_sandboxed(ws)

    # -- DIRECT -----------------------------------------------------------

    def _run_direct(self) -> Generator[float, None, None]:
        t0 = self.clock.now()
        seconds = direct_seconds(self.params, self.job, self.machine)
        interval = self.config.status_interval
        next_status = t0 + interval
        while next_status < t0 + seconds:
            yield next_status - self.clock.now()
            self._status_update(f"running {100 * (next_status - t0) / seconds:.0f}%")
            next_status += interval
        remaining = t0 + seconds - self.clock.now()
        if remaining > 0:
            yield remaining
        parallel = self.params.max_parallelism or self.machine.pcpus
        self._report.result = JobResult(
            state=JobState.DONE,
            exit_code=0,
            events_processed=self.job.event_count,
            started_at=t0,
            finished_at=t0 + seconds,
            cpu_share_avg=float(min(parallel, self.machine.pcpus)),
        )
        self._status_update(f"final: done, {self.job.event_count} events")

    def _status_update(self, detail: str) -> None:
        self._report.status_updates.append(self.clock.now())
        self._log(PilotPhase.RUN_JOB, f"status {detail}")

    # -- VIRTUALIZED ------------------------------------------------------

    def _run_virtualized(self) -> Generator[float, None, bool]:
        ws = yield from self.sandbox_setup()
        if ws is None:
            return False

        ok = True
        try:
            yield from self.run_job(ws)
        except (JobFailedError, HeartbeatRejectedError) as exc:
            ok = False
            self._report.error = str(exc)
            self._log(PilotPhase.RUN_JOB, f"error: {exc}")
        yield from self._teardown(ws, ok)
        return ok

    def sandbox_setup(self) -> Generator[float, None, str | None]:
        """Lease, contextualize and boot a workspace for the job.

        Returns the running workspace id, or None after a failed setup has been
        torn down.
        """
        client = self.client
        report = self._report
        ws: str | None = None
        self._log(PilotPhase.SANDBOX_SETUP)
        try:
            receipt = client.request_diskspace(
                self.config.image_id, self.config.volume_size, self.domain
            )
            ws = receipt.workspace_id
            self.state.workspace_id = ws
            report.t_setup = receipt.setup_s
            if receipt.setup_s > 0:
                yield receipt.setup_s
            client.mount_diskspace(ws)
            client.write_file(ws, MANIFEST_FILE, json.dumps(report.manifest, sort_keys=True))
            client.write_file(ws, JOB_FILE, json.dumps(self.job.to_dict(), sort_keys=True))
            client.unmount_diskspace(ws)
            client.start_vm(ws)
            self._log(PilotPhase.SANDBOX_SETUP, f"workspace {ws} running")
        except VirmError as exc:
            report.error = f"sandbox setup failed: {exc}"
            self._log(PilotPhase.SANDBOX_SETUP, f"error: {exc}")
            if ws is not None:
                yield from self._teardown(ws, ok=False)
            return None
        return ws

    def _run_sandboxed(self, ws: str) -> Generator[float, None, None]:
        client = self.client
        t0 = self.clock.now()
        next_hb = t0
        next_status = t0 + self.config.status_interval
        while True:
            try:
                view = client.get_workspace(ws)
            except VirmError as exc:
                raise JobFailedError(f"status query failed: {exc}", reason="status") from exc
            if not view.get("job"):
                raise JobFailedError(f"{ws} reports no payload", reason="exit")
            status = JobStatus.from_dict(view["job"])
            if status.state in (JobState.DONE, JobState.FAILED):
                break

            now = self.clock.now()
            if now >= next_hb - _SLACK:
                try:
                    expires = client.heartbeat(ws)
                except VirmError as exc:
                    raise HeartbeatRejectedError(f"heartbeat rejected: {exc}") from exc
                self._report.heartbeats.append(now)
                self.callback.on_heartbeat(HeartbeatEvent(self.pilot_id, ws, now, expires))
                next_hb += self.policy.interval
            if now >= next_status - _SLACK:
                self._status_update(
                    f"{status.state} {status.events_done}/{self.job.event_count} events"
                )
                next_status += self.config.status_interval

            eta = status.eta if status.eta is not None else math.inf
            yield max(min(next_hb, next_status, eta) - now, _MIN_WAIT)

        result = JobResult(
            state=status.state,
            exit_code=status.exit_code if status.exit_code is not None else 1,
            events_processed=status.events_done,
            started_at=status.started_at,
            finished_at=status.finished_at if status.finished_at is not None else t0,
            cpu_share_avg=status.cpu_share_avg,
            error=status.error,
            grant_latencies=status.grant_latencies,
        )
        self._report.result = result
        self._status_update(f"final: {status.state}, {status.events_done} events")
        if status.state == JobState.FAILED:
            reason = "oom" if status.error == "OOM" else "exit"
            raise JobFailedError(
                f"payload failed ({status.error or 'nonzero exit'}, exit {result.exit_code})",
                reason=reason,
            )

    def _retry(self, call: Callable, *args):
        last: VirmError | None = None
        for attempt in range(1, self.config.teardown_retries + 1):
            try:
                return call(*args)
            except UnknownWorkspaceError:
                raise
            except VirmError as exc:
                last = exc
                logger.warning(
                    "%s: %s failed (attempt %d/%d): %s",
                    self.pilot_id, call.__name__, attempt, self.config.teardown_retries, exc,
                )
        raise last

    def _teardown(self, ws: str, ok: bool) -> Generator[float, None, None]:
        client = self.client
        self._log(PilotPhase.SANDBOX_TEARDOWN)
        if not ok:
            self._log(PilotPhase.SANDBOX_TEARDOWN, f"error-log: {self._report.error}")
        try:
            state = WorkspaceState(self._retry(client.get_workspace, ws)["state"])
            if state == WorkspaceState.MOUNTED:
                self._retry(client.unmount_diskspace, ws)
                state = WorkspaceState.UNMOUNTED
            if state == WorkspaceState.RUNNING:
                teardown_s = self._retry(client.stop_vm, ws)
                self._report.t_teardown = teardown_s
                if teardown_s > 0:
                    yield teardown_s
                state = WorkspaceState.STOPPED
            self._retry(client.remove_diskspace, ws)
            self._log(PilotPhase.SANDBOX_TEARDOWN, f"workspace {ws} removed")
        except UnknownWorkspaceError:
            self._log(PilotPhase.SANDBOX_TEARDOWN, f"workspace {ws} already gone")
        except VirmError as exc:
            self._report.error = self._report.error or f"teardown failed: {exc}"
            self._log(PilotPhase.SANDBOX_TEARDOWN, f"error: teardown incomplete: {exc}")


def drive(pilot: Pilot, advance: Callable[[float], object]) -> PilotReport:
    """Run *pilot* to completion, calling *advance(seconds)* for every wait."""
    gen = pilot.run()
    try:
        wait = next(gen)
        while True:
            advance(wait)
            wait = gen.send(None)
    except StopIteration as stop:
        return stop.value
