"""Exception hierarchy for the virm-sim stack."""

from __future__ import annotations

from dataclasses import dataclass


class VirmSimError(Exception):
    """Base exception for all virm-sim errors."""

    error_code: str = "VIRM_SIM_ERROR"

    def __init__(self, message: str, details: dict | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.details = details

    def __str__(self) -> str:
        return self.message


# =============================================================================
# Scenario validation
# =============================================================================


@dataclass(frozen=True)
class Violation:
    """One violated scenario constraint."""

    code: str
    message: str


class ScenarioValidationError(VirmSimError):
    """Raised with every violated constraint of a scenario."""

    error_code = "VALIDATION_FAILED"

    def __init__(self, violations: list[Violation]) -> None:
        self.violations = violations
        detail = "\n".join(f"  - [{v.code}] {v.message}" for v in violations)
        super().__init__(
            f"Scenario validation failed:\n{detail}",
            details={"codes": [v.code for v in violations]},
        )

    @property
    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


class NonPositiveBaselineError(VirmSimError):
    """Overhead requested against a baseline that is not strictly positive."""

    error_code = "NON_POSITIVE_BASELINE"


# =============================================================================
# Scheduler
# =============================================================================


class SchedulerError(VirmSimError):
    """Error raised by the credit scheduler."""


class WindowTooLargeError(SchedulerError):
    """Share window longer than the simulated history."""

    error_code = "WINDOW_TOO_LARGE"


# =============================================================================
# Performance model
# =============================================================================


class PerfModelError(VirmSimError):
    """Error raised by the performance model."""


class ZeroCapacityError(PerfModelError):
    """A domain has no CPU capacity to make progress with."""

    error_code = "ZERO_CAPACITY"


class UnknownEndpointKindError(PerfModelError):
    """Transfer endpoint is not PHYSICAL, VIRTUAL or DOM0."""

    error_code = "UNKNOWN_ENDPOINT_KIND"


class CalibrationError(PerfModelError):
    """Error raised while fitting performance parameters."""


class NoBaselineRowError(CalibrationError):
    """Calibration targets lack the bare-metal baseline row."""

    error_code = "NO_BASELINE_ROW"


class FitDivergedError(CalibrationError):
    """Best fit still misses a target by more than the divergence limit."""

    error_code = "FIT_DIVERGED"

    def __init__(self, message: str, residuals: dict[str, float]) -> None:
        super().__init__(message, details={"residuals": residuals})
        self.residuals = residuals


# =============================================================================
# VIRM service
# =============================================================================


class VirmError(VirmSimError):
    """Error surfaced by the VIRM workspace API; maps onto an HTTP status."""

    error_code = "VIRM_ERROR"
    http_status = 500

    def __init__(
        self,
        message: str,
        workspace_id: str | None = None,
        details: dict | None = None,
    ) -> None:
        super().__init__(message, details=details)
        self.workspace_id = workspace_id


class UnknownWorkspaceError(VirmError):
    error_code = "UNKNOWN_WORKSPACE"
    http_status = 404


class BadStateError(VirmError):
    error_code = "BAD_STATE"
    http_status = 409


class VirmValidationError(VirmError):
    """Malformed request body or domain configuration."""

    error_code = "VALIDATION_FAILED"
    http_status = 422


class UnknownImageError(VirmValidationError):
    error_code = "UNKNOWN_IMAGE"


class InsufficientCapacityError(VirmError):
    error_code = "INSUFFICIENT_CAPACITY"
    http_status = 507


class EngineError(VirmError):
    """Deployment engine refused an operation on a volume or domain."""

    error_code = "ENGINE_ERROR"
    http_status = 500


VIRM_ERRORS: dict[str, type[VirmError]] = {
    cls.error_code: cls
    for cls in (
        UnknownWorkspaceError,
        BadStateError,
        VirmValidationError,
        UnknownImageError,
        InsufficientCapacityError,
        EngineError,
    )
}


# =============================================================================
# Pilot
# =============================================================================


class PilotError(VirmSimError):
    """Error raised inside a pilot phase."""


class WorkdirUnwritableError(PilotError):
    error_code = "WORKDIR_UNWRITABLE"


class TransferFailedError(PilotError):
    error_code = "TRANSFER_FAILED"


class JobFailedError(PilotError):
    """Sandboxed payload ended in OOM or with a nonzero exit."""

    error_code = "JOB_FAILED"

    def __init__(self, message: str, reason: str = "exit", details: dict | None = None) -> None:
        super().__init__(message, details=details)
        self.reason = reason


class HeartbeatRejectedError(PilotError):
    error_code = "HEARTBEAT_REJECTED"


# =============================================================================
# Harness
# =============================================================================


class HarnessError(VirmSimError):
    """Error raised by the scenario harness."""


class IOFailedError(HarnessError):
    error_code = "IO_FAILED"

    def __init__(self, message: str, path: str | None = None, details: dict | None = None) -> None:
        super().__init__(message, details=details)
        self.path = path
