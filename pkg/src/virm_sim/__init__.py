"""virm-sim - grid pilots running jobs in Xen sandboxes managed by a VIRM service."""

__version__ = "0.1.0"

from .callbacks import LoggingCallback, NullCallback, SimulationCallback
from .exceptions import (
    CalibrationError,
    HarnessError,
    PerfModelError,
    PilotError,
    ScenarioValidationError,
    SchedulerError,
    VirmError,
    VirmSimError,
)
from .harness import (
    HarnessConfig,
    ScenarioRun,
    emit_metrics,
    replay_table1,
    replay_table2,
    run_scenario,
    simulate,
)
from .pilot import Pilot, PilotConfig, PilotReport, detect_virm
from .scenario import load_scenario, validate_scenario
from .service import VirmService
from .types import (
    DomainConfig,
    HeartbeatPolicy,
    JobSpec,
    MachineSpec,
    PerfParams,
    PilotMode,
    PilotPhase,
    Scenario,
    WorkspaceState,
)

__all__ = [
    "__version__",
    # Types
    "MachineSpec",
    "DomainConfig",
    "JobSpec",
    "HeartbeatPolicy",
    "PerfParams",
    "Scenario",
    "WorkspaceState",
    "PilotPhase",
    "PilotMode",
    # Callbacks
    "SimulationCallback",
    "LoggingCallback",
    "NullCallback",
    # Exceptions
    "VirmSimError",
    "ScenarioValidationError",
    "SchedulerError",
    "PerfModelError",
    "CalibrationError",
    "VirmError",
    "PilotError",
    "HarnessError",
    # Scenario and service API
    "load_scenario",
    "validate_scenario",
    "VirmService",
    "Pilot",
    "PilotConfig",
    "PilotReport",
    "detect_virm",
    # Harness API
    "HarnessConfig",
    "ScenarioRun",
    "simulate",
    "run_scenario",
    "emit_metrics",
    "replay_table1",
    "replay_table2",
]
