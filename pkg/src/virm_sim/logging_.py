"""Logging for replay worker processes and the HTTP service threads.

Replays of several configurations can fan out over a process pool, and the
VIRM HTTP service handles each request on its own thread. Both funnel records
through one queue: workers install a QueueHandler via
:func:`worker_log_initializer`, the main process routes its own records through
the same queue, and a single QueueListener writes them to the console and to
``virm.log``. httpx and werkzeug log every request at INFO, so they are held
to WARNING unless verbose output was asked for.

Public API:
    setup_main_logging  -- call once in the main process before serving or replaying
    worker_log_initializer -- pass as initializer= to ProcessPoolExecutor
    stop_logging        -- call in a finally block once workers and servers stop
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import os
from logging.handlers import QueueHandler, QueueListener, RotatingFileHandler
from pathlib import Path

__all__ = ["LOG_FILE", "setup_main_logging", "worker_log_initializer", "stop_logging"]

LOG_FILE = "virm.log"
_LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
_NOISY_LOGGERS = ("httpx", "httpcore", "werkzeug")


def setup_main_logging(
    log_dir: Path | None = None,
    verbose: bool = False,
) -> tuple[mp.Queue, QueueListener]:
    """Start the queue listener and route root logging through it.

    Args:
        log_dir: If given, ``virm.log`` is written here (10 MiB, 3 backups).
        verbose: If True, root logger level is DEBUG; otherwise INFO.

    Returns:
        (queue, listener): pass *queue* to workers, call ``stop_logging(listener)``
        when done.
    """
    log_queue: mp.Queue = mp.Queue()
    formatter = logging.Formatter(_LOG_FORMAT)

    console = logging.StreamHandler()
    console.setFormatter(formatter)
    handlers: list[logging.Handler] = [console]

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_dir / LOG_FILE,
            maxBytes=10 * 1024 * 1024,
            backupCount=3,
        )
        file_handler.setFormatter(formatter)
        handlers.append(file_handler)

    listener = QueueListener(log_queue, *handlers, respect_handler_level=True)
    listener.start()

    root = logging.getLogger()
    for handler in [h for h in root.handlers if isinstance(h, QueueHandler)]:
        root.removeHandler(handler)
    root.addHandler(QueueHandler(log_queue))
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for name in _NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.DEBUG if verbose else logging.WARNING)

    return log_queue, listener


def worker_log_initializer(
    log_queue: mp.Queue,
    log_dir: Path | None = None,
) -> None:
    """Initializer for replay workers.

    Replaces all root handlers with a QueueHandler feeding the main process.

    Args:
        log_queue: The queue returned by :func:`setup_main_logging`.
        log_dir: If given, a ``worker_{pid}.log`` file is written here too.
    """
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(logging.DEBUG)
    root.addHandler(QueueHandler(log_queue))

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(log_dir / f"worker_{os.getpid()}.log")
        fh.setFormatter(logging.Formatter(_LOG_FORMAT))
        root.addHandler(fh)


def stop_logging(listener: QueueListener) -> None:
    """Detach the root QueueHandler and stop the listener.

    Safe to call more than once.
    """
    root = logging.getLogger()
    for handler in [h for h in root.handlers if isinstance(h, QueueHandler)]:
        root.removeHandler(handler)
    try:
        listener.stop()
    except Exception:  # noqa: BLE001
        pass
