"""Environment validation and startup diagnostics for virm-sim.

Checks the loopback port the service binds, the scenario file it loads and
the directories results are written to, before any simulation starts.
"""

from __future__ import annotations

import errno
import logging
import os
import platform
import socket
import sys
import tempfile
from collections.abc import Iterable
from pathlib import Path

logger = logging.getLogger(__name__)


class EnvironmentError(RuntimeError):
    """Raised when the runtime environment cannot support the requested command."""

    def __init__(self, problems: list[str]) -> None:
        self.problems = problems
        detail = "\n".join(f"  - {p}" for p in problems)
        super().__init__(f"Environment validation failed:\n{detail}")


def port_available(host: str, port: int) -> bool:
    """True if *host*:*port* can be bound right now."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        try:
            sock.bind((host, port))
        except OSError as exc:
            if exc.errno in (errno.EADDRINUSE, errno.EACCES):
                return False
            raise
    return True


def _dir_writable(directory: Path) -> bool:
    try:
        directory.mkdir(parents=True, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(dir=directory)
        os.close(fd)
        os.unlink(tmp_path)
    except OSError:
        return False
    return True


def validate_environment(
    *,
    host: str = "127.0.0.1",
    port: int | None = None,
    scenario_path: Path | str | None = None,
    output_paths: Iterable[Path | str] = (),
) -> None:
    """Validate everything the command needs before it starts.

    Raises EnvironmentError with all detected problems if any checks fail.
    """
    problems: list[str] = []

    if port is not None:
        if not 0 <= port <= 65535:
            problems.append(f"port {port} is outside 0-65535")
        else:
            try:
                if not port_available(host, port):
                    problems.append(f"{host}:{port} is already in use")
            except OSError as e:
                problems.append(f"cannot probe {host}:{port}: {e}")

    if scenario_path is not None:
        path = Path(scenario_path)
        if not path.is_file():
            problems.append(f"scenario file {path} does not exist")
        elif not os.access(path, os.R_OK):
            problems.append(f"scenario file {path} is not readable")

    for output in output_paths:
        parent = Path(output).parent
        if not _dir_writable(parent):
            problems.append(f"output directory {parent} is not writable")

    if problems:
        raise EnvironmentError(problems)


def log_startup_diagnostics(**settings: object) -> None:
    """Log interpreter, platform and the effective settings at INFO level.

    Does not raise.
    """
    logger.info("Python version: %s", sys.version)
    logger.info("Platform: %s", platform.platform())
    logger.info("TMPDIR: %s", tempfile.gettempdir())
    for key in sorted(settings):
        logger.info("%s: %s", key, settings[key])

    try:
        import numpy  # noqa: PLC0415

        logger.info("numpy version: %s", numpy.__version__)
    except ImportError:
        logger.warning("numpy is not installed; calibration will fail")
