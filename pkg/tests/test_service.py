"""Tests for the VIRM workspace state machine, leases and capacity accounting."""

from __future__ import annotations

import json
import random
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from virm_sim.engine import JOB_FILE, SimulatedEngine
from virm_sim.exceptions import (
    BadStateError,
    EngineError,
    InsufficientCapacityError,
    UnknownImageError,
    UnknownWorkspaceError,
    VirmError,
    VirmValidationError,
)
from virm_sim.service import ALLOWED_TRANSITIONS, ServiceConfig, VirmService
from virm_sim.types import DomainConfig, HeartbeatPolicy, JobSpec, WorkspaceState

S = WorkspaceState


def _ready(service, domain: DomainConfig, job: JobSpec | None = None) -> str:
    """Provision, contextualize and unmount a workspace."""
    ws = service.request_diskspace("slc4", 10, domain).workspace_id
    service.mount_diskspace(ws)
    if job is not None:
        service.write_file(ws, JOB_FILE, json.dumps(job.to_dict()))
    service.unmount_diskspace(ws)
    return ws


def _state(service, ws: str) -> WorkspaceState:
    return service.workspace_record(ws).state


# =============================================================================
# Lifecycle
# =============================================================================


class TestLifecycle:
    def test_full_lifecycle(self, service, domain):
        receipt = service.request_diskspace("slc4", 10, domain)
        ws = receipt.workspace_id
        assert receipt.setup_s == pytest.approx(90.0)
        assert _state(service, ws) == S.PROVISIONED

        service.mount_diskspace(ws)
        service.write_file(ws, "motd", "hello")
        service.unmount_diskspace(ws)
        service.start_vm(ws)
        assert service.get_workspace(ws)["state"] == "running"
        assert service.stop_vm(ws) == pytest.approx(90.0)
        service.remove_diskspace(ws)

        assert service.workspace_record(ws).history == [
            S.REQUESTED,
            S.PROVISIONED,
            S.MOUNTED,
            S.UNMOUNTED,
            S.RUNNING,
            S.STOPPED,
            S.REMOVED,
        ]

    def test_history_only_uses_allowed_edges(self, service, domain):
        ws = _ready(service, domain)
        service.mount_diskspace(ws)
        service.unmount_diskspace(ws)
        service.remove_diskspace(ws)
        history = service.workspace_record(ws).history
        for before, after in zip(history, history[1:]):
            assert after in ALLOWED_TRANSITIONS[before]

    def test_removed_workspace_is_gone(self, service, domain):
        ws = service.request_diskspace("slc4", 10, domain).workspace_id
        service.remove_diskspace(ws)
        with pytest.raises(UnknownWorkspaceError):
            service.get_workspace(ws)
        with pytest.raises(UnknownWorkspaceError):
            service.remove_diskspace(ws)

    def test_unknown_workspace(self, service):
        with pytest.raises(UnknownWorkspaceError):
            service.mount_diskspace("ws-9999")

    def test_files_visible_after_unmount(self, service, domain):
        ws = _ready(service, domain, JobSpec(cpu_work=10, job_id="j"))
        assert json.loads(service.list_files(ws)[JOB_FILE])["job_id"] == "j"

    def test_running_workspace_reports_job(self, service, domain, small_job):
        ws = _ready(service, domain, small_job)
        service.start_vm(ws)
        job = service.get_workspace(ws)["job"]
        assert job["state"] == "running"
        assert job["eta"] == pytest.approx(306.0)

    def test_idle_workspace_has_no_job(self, service, domain):
        ws = _ready(service, domain)
        service.start_vm(ws)
        assert service.get_workspace(ws)["job"] is None


class TestBadState:
    def test_start_before_contextualization(self, service, domain):
        ws = service.request_diskspace("slc4", 10, domain).workspace_id
        with pytest.raises(BadStateError):
            service.start_vm(ws)

    def test_write_while_unmounted(self, service, domain):
        ws = _ready(service, domain)
        with pytest.raises(BadStateError):
            service.write_file(ws, "motd", "hello")

    def test_remove_running(self, service, domain):
        ws = _ready(service, domain)
        service.start_vm(ws)
        with pytest.raises(BadStateError):
            service.remove_diskspace(ws)

    def test_heartbeat_before_start(self, service, domain):
        ws = _ready(service, domain)
        with pytest.raises(BadStateError):
            service.heartbeat(ws)

    def test_no_second_boot(self, service, domain):
        ws = _ready(service, domain)
        service.start_vm(ws)
        service.stop_vm(ws)
        with pytest.raises(BadStateError):
            service.mount_diskspace(ws)
        with pytest.raises(BadStateError):
            service.start_vm(ws)

    def test_bad_state_carries_workspace_and_status(self, service, domain):
        ws = service.request_diskspace("slc4", 10, domain).workspace_id
        with pytest.raises(BadStateError) as exc_info:
            service.stop_vm(ws)
        assert exc_info.value.workspace_id == ws
        assert exc_info.value.http_status == 409


# =============================================================================
# Validation and capacity
# =============================================================================


class TestRequestValidation:
    def test_unknown_image(self, service, domain):
        with pytest.raises(UnknownImageError) as exc_info:
            service.request_diskspace("rhel9", 10, domain)
        assert isinstance(exc_info.value, VirmValidationError)

    def test_bad_pinning(self, service):
        with pytest.raises(VirmValidationError, match="pCPU"):
            service.request_diskspace("slc4", 10, DomainConfig("dom1", pinning=(9,)))

    def test_zero_size(self, service, domain):
        with pytest.raises(VirmValidationError, match="size"):
            service.request_diskspace("slc4", 0, domain)

    def test_duplicate_domain(self, service, domain):
        service.request_diskspace("slc4", 10, domain)
        with pytest.raises(VirmValidationError, match="already"):
            service.request_diskspace("slc4", 10, domain)

    def test_file_name_with_slash(self, service, domain):
        ws = service.request_diskspace("slc4", 10, domain).workspace_id
        service.mount_diskspace(ws)
        with pytest.raises(VirmValidationError):
            service.write_file(ws, "etc/passwd", "x")


class TestCapacity:
    def test_fourth_domain_does_not_fit(self, service):
        for i in range(3):
            service.request_diskspace("slc4", 10, DomainConfig(f"dom{i}", memory=2048))
        assert service.committed_memory() == 8192
        with pytest.raises(InsufficientCapacityError):
            service.request_diskspace("slc4", 10, DomainConfig("dom3", memory=2048))

    def test_removal_frees_capacity(self, service):
        ids = [
            service.request_diskspace("slc4", 10, DomainConfig(f"dom{i}")).workspace_id
            for i in range(3)
        ]
        service.remove_diskspace(ids[0])
        service.request_diskspace("slc4", 10, DomainConfig("dom3"))
        assert service.committed_memory() == 8192

    def test_concurrent_requests_never_over_commit(self, service):
        def request(i: int):
            try:
                return service.request_diskspace("slc4", 10, DomainConfig(f"dom{i}")).workspace_id
            except InsufficientCapacityError:
                return None

        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(request, range(12)))
        assert len([r for r in results if r is not None]) == 3
        assert service.committed_memory() <= service.machine.total_memory

    def test_concurrent_lifecycles_on_separate_workspaces(self, service):
        errors: list[Exception] = []

        def lifecycle(i: int) -> None:
            try:
                ws = _ready(service, DomainConfig(f"dom{i}"))
                service.start_vm(ws)
                service.heartbeat(ws)
                service.stop_vm(ws)
                service.remove_diskspace(ws)
            except VirmError as exc:
                errors.append(exc)

        threads = [threading.Thread(target=lifecycle, args=(i,)) for i in range(3)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []
        assert all(_state(service, ws) == S.REMOVED for ws in service.workspace_ids())


# =============================================================================
# Leases
# =============================================================================


class TestLeases:
    def test_lease_expires_after_missed_heartbeats(self, service, domain):
        ws = _ready(service, domain)
        service.start_vm(ws)
        service.advance_clock_to(95.0)
        assert _state(service, ws) == S.RUNNING
        service.advance_clock_to(100.0)
        assert _state(service, ws) == S.STOPPED

    def test_heartbeats_keep_lease_alive(self, service, domain):
        ws = _ready(service, domain)
        service.start_vm(ws)
        for t in range(30, 331, 30):
            service.advance_clock_to(float(t))
            expires = service.heartbeat(ws)
            assert expires == pytest.approx(t + 90.0)
        assert _state(service, ws) == S.RUNNING

    def test_heartbeat_after_expiry_is_rejected(self, service, domain):
        ws = _ready(service, domain)
        service.start_vm(ws)
        service.advance_clock(200.0)
        with pytest.raises(BadStateError):
            service.heartbeat(ws)

    def test_expiry_kills_payload(self, service, domain, small_job):
        ws = _ready(service, domain, small_job)
        service.start_vm(ws)
        service.advance_clock_to(120.0)
        job = service.get_workspace(ws)["job"]
        assert job["state"] == "failed"
        assert job["error"] == "domain shut down"

    def test_sweep_ignores_non_running(self, service, domain):
        ws = _ready(service, domain)
        assert service.lease_sweep(1000.0) == []
        assert _state(service, ws) == S.UNMOUNTED

    def test_clock_moves_only_forward(self, service):
        service.advance_clock_to(50.0)
        assert service.advance_clock_to(10.0) == 50.0
        with pytest.raises(VirmValidationError):
            service.advance_clock(-1.0)


# =============================================================================
# Random lifecycles and engine call order
# =============================================================================

_OPS = (
    "request", "mount", "write", "unmount", "start", "stop",
    "remove", "heartbeat", "advance",
)


class _FlakyShutdownEngine(SimulatedEngine):
    """Refuses the first shutdown it is asked for."""

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.refused = False

    def shutdown(self, handle: str) -> None:
        if not self.refused:
            self.refused = True
            raise EngineError(f"hypervisor busy shutting down {handle}")
        super().shutdown(handle)


def _assert_shutdown_before_destroy(service) -> None:
    calls = service.engine.calls
    for ws_id in service.workspace_ids():
        ws = service.workspace_record(ws_id)
        destroy = ("destroy_volume", ws.volume_id)
        if ws.handle is None or destroy not in calls:
            continue
        shutdown = ("shutdown", ws.handle)
        assert shutdown in calls, f"{ws_id} destroyed without shutting down {ws.handle}"
        assert calls.index(shutdown) < calls.index(destroy)


def _assert_histories_legal(service) -> None:
    for ws_id in service.workspace_ids():
        ws = service.workspace_record(ws_id)
        assert ws.history[0] == S.REQUESTED
        assert ws.history[-1] == ws.state
        for src, dst in zip(ws.history, ws.history[1:]):
            assert dst in ALLOWED_TRANSITIONS[src], f"{ws_id}: {src} -> {dst}"


def _drive(service, rng: random.Random, job: JobSpec, steps: int = 80) -> None:
    """Apply *steps* random operations, swallowing every refusal."""
    for _ in range(steps):
        op = rng.choice(_OPS)
        ids = service.workspace_ids()
        ws = rng.choice(ids) if ids else None
        try:
            if op == "request" or ws is None:
                domain = DomainConfig(f"dom{rng.randint(1, 4)}", vcpus=2, memory=2048)
                service.request_diskspace("slc4", 10, domain)
            elif op == "mount":
                service.mount_diskspace(ws)
            elif op == "write":
                service.write_file(ws, JOB_FILE, json.dumps(job.to_dict()))
            elif op == "unmount":
                service.unmount_diskspace(ws)
            elif op == "start":
                service.start_vm(ws)
            elif op == "stop":
                service.stop_vm(ws)
            elif op == "remove":
                service.remove_diskspace(ws)
            elif op == "heartbeat":
                service.heartbeat(ws)
            else:
                service.advance_clock(rng.uniform(0.0, 60.0))
        except VirmError:
            pass


class TestRandomLifecycles:
    @pytest.mark.parametrize("seed", range(20))
    def test_histories_follow_allowed_transitions(self, service, small_job, seed):
        _drive(service, random.Random(seed), small_job)
        _assert_histories_legal(service)
        _assert_shutdown_before_destroy(service)

    @pytest.mark.parametrize("seed", range(5))
    def test_drained_service_shuts_down_before_destroying(self, service, small_job, seed):
        _drive(service, random.Random(seed), small_job)
        for ws_id in service.workspace_ids():
            if _state(service, ws_id) == S.RUNNING:
                service.stop_vm(ws_id)
            if _state(service, ws_id) == S.MOUNTED:
                service.unmount_diskspace(ws_id)
            if _state(service, ws_id) != S.REMOVED:
                service.remove_diskspace(ws_id)
        assert all(_state(service, ws) == S.REMOVED for ws in service.workspace_ids())
        _assert_histories_legal(service)
        _assert_shutdown_before_destroy(service)


class TestEngineCallOrder:
    def test_normal_teardown(self, service, domain, small_job):
        ws = _ready(service, domain, small_job)
        service.start_vm(ws)
        service.advance_clock(30.0)
        service.stop_vm(ws)
        service.remove_diskspace(ws)
        _assert_shutdown_before_destroy(service)

    def test_lease_expiry_then_remove(self, service, domain, small_job):
        ws = _ready(service, domain, small_job)
        service.start_vm(ws)
        service.advance_clock_to(200.0)
        assert _state(service, ws) == S.STOPPED
        service.remove_diskspace(ws)
        _assert_shutdown_before_destroy(service)

    def test_failed_shutdown_blocks_remove(self, machine, params, clock, domain):
        engine = _FlakyShutdownEngine(machine, params, clock)
        service = VirmService(machine, params, HeartbeatPolicy(), clock=clock, engine=engine)
        ws = _ready(service, domain)
        service.start_vm(ws)

        with pytest.raises(EngineError, match="hypervisor busy"):
            service.stop_vm(ws)
        assert _state(service, ws) == S.RUNNING
        with pytest.raises(BadStateError):
            service.remove_diskspace(ws)
        assert not any(op == "destroy_volume" for op, _ in engine.calls)

        service.advance_clock_to(200.0)
        assert _state(service, ws) == S.STOPPED
        service.remove_diskspace(ws)
        _assert_shutdown_before_destroy(service)
        _assert_histories_legal(service)

    def test_boot_failure_never_shuts_down(self, service, domain):
        ws = service.request_diskspace("slc4", 10, domain).workspace_id
        service.mount_diskspace(ws)
        service.write_file(ws, JOB_FILE, "{not json")
        service.unmount_diskspace(ws)
        with pytest.raises(BadStateError, match="unreadable"):
            service.start_vm(ws)
        assert service.workspace_record(ws).handle is None

        service.remove_diskspace(ws)
        ops = [op for op, _ in service.engine.calls]
        assert "boot" not in ops and "shutdown" not in ops
        assert ops[-1] == "destroy_volume"
        _assert_histories_legal(service)


# =============================================================================
# Configuration
# =============================================================================


class TestServiceConfig:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("VIRM_PORT", raising=False)
        monkeypatch.delenv("VIRM_SCENARIO", raising=False)
        config = ServiceConfig.from_env()
        assert (config.host, config.port, config.scenario_path) == ("127.0.0.1", 18700, None)

    def test_env_port(self, monkeypatch):
        monkeypatch.setenv("VIRM_PORT", "18800")
        assert ServiceConfig.from_env().port == 18800

    def test_invalid_env_port_ignored(self, monkeypatch):
        monkeypatch.setenv("VIRM_PORT", "99999")
        assert ServiceConfig.from_env().port == 18700

    def test_explicit_override_wins(self, monkeypatch):
        monkeypatch.setenv("VIRM_PORT", "18800")
        assert ServiceConfig.from_env(port=0).port == 0

    def test_none_override_ignored(self, monkeypatch):
        monkeypatch.setenv("VIRM_PORT", "18800")
        assert ServiceConfig.from_env(port=None).port == 18800
