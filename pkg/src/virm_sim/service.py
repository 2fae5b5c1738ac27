"""VIRM workspace service: the state machine between pilots and the engine.

Lock order is workspace lock, then the registry lock, then the engine's own
lock. Request handlers never move the clock; only :meth:`VirmService.advance_clock_to`
does, and it runs the lease sweep at every sweep-period boundary it crosses.
"""

from __future__ import annotations

import logging
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .clock import VirtualClock
from .engine import DeploymentEngine, JobStatus, SimulatedEngine
from .exceptions import (
    BadStateError,
    EngineError,
    InsufficientCapacityError,
    UnknownImageError,
    UnknownWorkspaceError,
    VirmValidationError,
)
from .scenario import domain_violations
from .types import DomainConfig, HeartbeatPolicy, MachineSpec, PerfParams, WorkspaceState

logger = logging.getLogger(__name__)

API_VERSION = "1"
SERVICE_NAME = "virm"
DEFAULT_PORT = 18700

S = WorkspaceState
ALLOWED_TRANSITIONS: dict[WorkspaceState, frozenset[WorkspaceState]] = {
    S.REQUESTED: frozenset({S.PROVISIONED}),
    S.PROVISIONED: frozenset({S.MOUNTED, S.REMOVED}),
    S.MOUNTED: frozenset({S.UNMOUNTED}),
    S.UNMOUNTED: frozenset({S.MOUNTED, S.RUNNING, S.REMOVED}),
    S.RUNNING: frozenset({S.STOPPED}),
    S.STOPPED: frozenset({S.REMOVED}),
    S.REMOVED: frozenset(),
}


@dataclass(frozen=True)
class ServiceConfig:
    """Where the HTTP service listens and which scenario configures its host."""

    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    scenario_path: Path | None = None

    @classmethod
    def from_env(cls, **overrides) -> ServiceConfig:
        """Defaults, then VIRM_PORT / VIRM_SCENARIO, then explicit *overrides*.

        Invalid environment values are logged and ignored.
        """
        values: dict = {}
        env_port = os.environ.get("VIRM_PORT")
        if env_port is not None:
            try:
                port = int(env_port)
                if not 0 <= port <= 65535:
                    raise ValueError(port)
                values["port"] = port
            except ValueError:
                logger.warning("Invalid VIRM_PORT value '%s', using default", env_port)
        env_scenario = os.environ.get("VIRM_SCENARIO")
        if env_scenario:
            values["scenario_path"] = Path(env_scenario)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class Provisioned:
    """Receipt for a new workspace; the caller charges ``setup_s`` to its timeline."""

    workspace_id: str
    setup_s: float


@dataclass
class Workspace:
    workspace_id: str
    domain: DomainConfig
    image_id: str
    volume_size: float
    created_at: float
    state: WorkspaceState = WorkspaceState.REQUESTED
    last_heartbeat: float | None = None
    volume_id: str | None = None
    handle: str | None = None
    history: list[WorkspaceState] = field(default_factory=list)

    @property
    def booted(self) -> bool:
        return self.handle is not None

    def to_dict(self, job: JobStatus | None = None) -> dict:
        return {
            "workspace_id": self.workspace_id,
            "state": str(self.state),
            "domain": self.domain.to_dict(),
            "image_id": self.image_id,
            "volume_size": self.volume_size,
            "created_at": self.created_at,
            "last_heartbeat": self.last_heartbeat,
            "job": job.to_dict() if job is not None else None,
        }


class VirmService:
    """Workspace lifecycle, heartbeat leases and capacity accounting.

    Example:
        >>> service = VirmService(MachineSpec(), PerfParams())
        >>> ws = service.request_diskspace("slc4", 10, DomainConfig("dom1")).workspace_id
        >>> service.mount_diskspace(ws)
    """

    def __init__(
        self,
        machine: MachineSpec,
        params: PerfParams,
        heartbeat: HeartbeatPolicy | None = None,
        *,
        clock: VirtualClock | None = None,
        engine: DeploymentEngine | None = None,
    ) -> None:
        self.machine = machine
        self.params = params
        self.policy = heartbeat or HeartbeatPolicy()
        self.clock = clock or VirtualClock()
        self.engine = engine or SimulatedEngine(machine, params, self.clock)
        self._workspaces: dict[str, Workspace] = {}
        self._ws_locks: dict[str, threading.RLock] = {}
        self._registry_lock = threading.Lock()
        self._clock_lock = threading.Lock()
        self._next_id = 1

    @property
    def setup_seconds(self) -> float:
        return self.params.k_setup_shutdown / 2.0

    @property
    def teardown_seconds(self) -> float:
        return self.params.k_setup_shutdown / 2.0

    def identity(self) -> dict:
        return {"service": SERVICE_NAME, "api_version": API_VERSION, "engine": self.engine.name}

    # ------------------------------------------------------------------
    # Registry helpers
    # ------------------------------------------------------------------

    def _lock_for(self, workspace_id: str) -> threading.RLock:
        with self._registry_lock:
            lock = self._ws_locks.get(workspace_id)
        if lock is None:
            raise UnknownWorkspaceError(f"no workspace {workspace_id!r}", workspace_id)
        return lock

    def _get(self, workspace_id: str) -> Workspace:
        with self._registry_lock:
            ws = self._workspaces.get(workspace_id)
        if ws is None or ws.state == WorkspaceState.REMOVED:
            raise UnknownWorkspaceError(f"no workspace {workspace_id!r}", workspace_id)
        return ws

    def _require(self, ws: Workspace, *states: WorkspaceState, action: str) -> None:
        if ws.state not in states:
            allowed = ", ".join(str(s) for s in states)
            raise BadStateError(
                f"cannot {action} {ws.workspace_id} in state {ws.state} (needs {allowed})",
                ws.workspace_id,
                details={"state": str(ws.state)},
            )

    @staticmethod
    def _transition(ws: Workspace, new: WorkspaceState) -> None:
        if new not in ALLOWED_TRANSITIONS[ws.state]:
            raise BadStateError(
                f"illegal transition {ws.state} -> {new} for {ws.workspace_id}", ws.workspace_id
            )
        logger.debug("%s: %s -> %s", ws.workspace_id, ws.state, new)
        ws.state = new
        ws.history.append(new)

    def committed_memory(self) -> int:
        """Dom_0 plus the memory of every workspace not yet removed."""
        with self._registry_lock:
            live = [w for w in self._workspaces.values() if w.state != WorkspaceState.REMOVED]
            return self.machine.dom0_memory + sum(w.domain.memory for w in live)

    # ------------------------------------------------------------------
    # Lifecycle
    # ------------------------------------------------------------------

    def request_diskspace(
        self, image_id: str, size_gb: float, domain: DomainConfig
    ) -> Provisioned:
        """Create a workspace for *domain* backed by a fresh volume of *image_id*.

        Raises:
            UnknownImageError: the engine has no such image.
            VirmValidationError: the domain or size is invalid for this host.
            InsufficientCapacityError: the domain's memory would over-commit the host.
        """
        if image_id not in self.engine.images:
            raise UnknownImageError(
                f"unknown image {image_id!r}", details={"known": sorted(self.engine.images)}
            )
        problems = [v.message for v in domain_violations(self.machine, [domain])]
        if size_gb <= 0:
            problems.append(f"volume size must be > 0, got {size_gb}")
        if problems:
            raise VirmValidationError(
                "; ".join(problems),
                details={"domain": domain.to_dict()},
            )

        with self._registry_lock:
            live = [w for w in self._workspaces.values() if w.state != WorkspaceState.REMOVED]
            if any(w.domain.domain_id == domain.domain_id for w in live):
                raise VirmValidationError(f"domain {domain.domain_id!r} already has a workspace")
            committed = self.machine.dom0_memory + sum(w.domain.memory for w in live)
            if committed + domain.memory > self.machine.total_memory:
                raise InsufficientCapacityError(
                    f"{domain.domain_id} needs {domain.memory} MiB; "
                    f"{self.machine.total_memory - committed} MiB uncommitted",
                    details={"committed": committed, "total": self.machine.total_memory},
                )
            workspace_id = f"ws-{self._next_id:04d}"
            self._next_id += 1
            ws = Workspace(
                workspace_id=workspace_id,
                domain=domain,
                image_id=image_id,
                volume_size=float(size_gb),
                created_at=self.clock.now(),
                history=[WorkspaceState.REQUESTED],
            )
            self._workspaces[workspace_id] = ws
            self._ws_locks[workspace_id] = threading.RLock()

        with self._lock_for(workspace_id):
            ws.volume_id = self.engine.provision_volume(image_id, size_gb)
            self._transition(ws, WorkspaceState.PROVISIONED)
        logger.info("Provisioned %s for %s (%s, %.1f GB)", workspace_id, domain.domain_id,
                    image_id, size_gb)
        return Provisioned(workspace_id, self.setup_seconds)

    def mount_diskspace(self, workspace_id: str) -> None:
        with self._lock_for(workspace_id):
            ws = self._get(workspace_id)
            self._require(ws, WorkspaceState.PROVISIONED, WorkspaceState.UNMOUNTED, action="mount")
            if ws.booted:
                raise BadStateError(f"{workspace_id} already booted its VM", workspace_id)
            self.engine.attach(ws.volume_id)
            self._transition(ws, WorkspaceState.MOUNTED)

    def write_file(self, workspace_id: str, name: str, content: str) -> None:
        """Add a contextualization file while the workspace is mounted."""
        if not name or "/" in name:
            raise VirmValidationError(f"invalid file name {name!r}", workspace_id)
        with self._lock_for(workspace_id):
            ws = self._get(workspace_id)
            self._require(ws, WorkspaceState.MOUNTED, action="write to")
            self.engine.write_file(ws.volume_id, name, content)

    def list_files(self, workspace_id: str) -> dict[str, str]:
        with self._lock_for(workspace_id):
            ws = self._get(workspace_id)
            return self.engine.read_files(ws.volume_id)

    def unmount_diskspace(self, workspace_id: str) -> None:
        with self._lock_for(workspace_id):
            ws = self._get(workspace_id)
            self._require(ws, WorkspaceState.MOUNTED, action="unmount")
            self.engine.detach(ws.volume_id)
            self._transition(ws, WorkspaceState.UNMOUNTED)

    def start_vm(self, workspace_id: str) -> None:
        with self._lock_for(workspace_id):
            ws = self._get(workspace_id)
            self._require(ws, WorkspaceState.UNMOUNTED, action="start")
            if ws.booted:
                raise BadStateError(f"{workspace_id} already booted its VM", workspace_id)
            try:
                ws.handle = self.engine.boot(ws.domain, ws.volume_id)
            except EngineError as exc:
                raise BadStateError(str(exc), workspace_id) from exc
            ws.last_heartbeat = self.clock.now()
            self._transition(ws, WorkspaceState.RUNNING)
            logger.info("Started %s as %s", workspace_id, ws.handle)

    def stop_vm(self, workspace_id: str) -> float:
        """Shut the VM down; returns the teardown seconds the caller should charge."""
        with self._lock_for(workspace_id):
            ws = self._get(workspace_id)
            self._require(ws, WorkspaceState.RUNNING, action="stop")
            self._stop(ws)
        return self.teardown_seconds

    def _stop(self, ws: Workspace) -> None:
        self.engine.shutdown(ws.handle)
        self._transition(ws, WorkspaceState.STOPPED)
        logger.info("Stopped %s", ws.workspace_id)

    def remove_diskspace(self, workspace_id: str) -> None:
        with self._lock_for(workspace_id):
            ws = self._get(workspace_id)
            self._require(
                ws,
                WorkspaceState.STOPPED,
                WorkspaceState.PROVISIONED,
                WorkspaceState.UNMOUNTED,
                action="remove",
            )
            self.engine.destroy_volume(ws.volume_id)
            with self._registry_lock:
                self._transition(ws, WorkspaceState.REMOVED)
            logger.info("Removed %s", workspace_id)

    def heartbeat(self, workspace_id: str) -> float:
        """Refresh the lease; returns the new expiry time."""
        with self._lock_for(workspace_id):
            ws = self._get(workspace_id)
            self._require(ws, WorkspaceState.RUNNING, action="heartbeat")
            now = self.clock.now()
            ws.last_heartbeat = now
            return now + self.policy.lease_seconds

    def get_workspace(self, workspace_id: str) -> dict:
        with self._lock_for(workspace_id):
            ws = self._get(workspace_id)
            job = self.engine.job_status(ws.handle) if ws.handle else None
            return ws.to_dict(job)

    def workspace_record(self, workspace_id: str) -> Workspace:
        """The live record, removed workspaces included."""
        with self._registry_lock:
            try:
                return self._workspaces[workspace_id]
            except KeyError:
                raise UnknownWorkspaceError(
                    f"no workspace {workspace_id!r}", workspace_id
                ) from None

    def workspace_ids(self) -> list[str]:
        with self._registry_lock:
            return list(self._workspaces)

    # ------------------------------------------------------------------
    # Leases and time
    # ------------------------------------------------------------------

    def lease_sweep(self, now: float | None = None) -> list[str]:
        """Stop every RUNNING workspace whose lease has lapsed at *now*."""
        now = self.clock.now() if now is None else now
        expired = []
        for workspace_id in self.workspace_ids():
            with self._lock_for(workspace_id):
                ws = self.workspace_record(workspace_id)
                if ws.state != WorkspaceState.RUNNING or ws.last_heartbeat is None:
                    continue
                if now - ws.last_heartbeat > self.policy.lease_seconds:
                    logger.warning(
                        "Lease expired for %s (last heartbeat %.1f, now %.1f)",
                        workspace_id, ws.last_heartbeat, now,
                    )
                    self._stop(ws)
                    expired.append(workspace_id)
        return expired

    def advance_clock_to(self, t: float) -> float:
        """Move virtual time to *t*, sweeping leases at each sweep-period boundary."""
        with self._clock_lock:
            period = self.policy.sweep_period
            boundary = (math.floor(self.clock.now() / period) + 1) * period
            while boundary <= t:
                self.engine.advance_to(boundary)
                self.clock.advance_to(boundary)
                self.lease_sweep(boundary)
                boundary += period
            self.engine.advance_to(t)
            return self.clock.advance_to(t)

    def advance_clock(self, seconds: float) -> float:
        if seconds < 0:
            raise VirmValidationError(f"cannot advance the clock by {seconds} s")
        return self.advance_clock_to(self.clock.now() + seconds)
