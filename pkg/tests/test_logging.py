"""Tests for the queue-based logging shared by replay workers and service threads."""

from __future__ import annotations

import io
import logging
import multiprocessing as mp
import os
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from logging.handlers import QueueHandler, QueueListener
from pathlib import Path

from virm_sim.logging_ import LOG_FILE, setup_main_logging, stop_logging, worker_log_initializer


def _capture(listener: QueueListener) -> io.StringIO:
    captured = io.StringIO()
    handler = logging.StreamHandler(captured)
    handler.setFormatter(logging.Formatter("%(message)s"))
    listener.handlers = listener.handlers + (handler,)
    return captured


def test_setup_main_logging_returns_queue_and_listener():
    log_queue, listener = setup_main_logging()
    try:
        assert isinstance(log_queue, mp.queues.Queue)
        assert isinstance(listener, QueueListener)
    finally:
        stop_logging(listener)


def test_httpx_held_to_warning_unless_verbose():
    _, listener = setup_main_logging()
    try:
        assert logging.getLogger("httpx").level == logging.WARNING
        assert logging.getLogger("werkzeug").level == logging.WARNING
    finally:
        stop_logging(listener)

    _, listener = setup_main_logging(verbose=True)
    try:
        assert logging.getLogger("httpx").level == logging.DEBUG
        assert logging.getLogger().level == logging.DEBUG
    finally:
        stop_logging(listener)


def test_log_file_written(tmp_path: Path):
    _, listener = setup_main_logging(log_dir=tmp_path)
    try:
        logging.getLogger("virm_sim.test").info("to-the-file")
        time.sleep(0.5)
    finally:
        stop_logging(listener)
    assert "to-the-file" in (tmp_path / LOG_FILE).read_text()


def test_worker_log_initializer_adds_queue_handler():
    log_queue = mp.Queue()
    root = logging.getLogger()
    saved = list(root.handlers)
    try:
        worker_log_initializer(log_queue)
        assert any(isinstance(h, QueueHandler) for h in root.handlers)
    finally:
        root.handlers[:] = saved


def test_service_threads_share_the_queue():
    """Records from request-handler threads arrive through the same listener."""
    _, listener = setup_main_logging()
    captured = _capture(listener)
    try:
        thread = threading.Thread(
            target=lambda: logging.getLogger("virm_sim.server").info("from-a-handler")
        )
        thread.start()
        thread.join()
        time.sleep(0.5)
        assert "from-a-handler" in captured.getvalue()
    finally:
        stop_logging(listener)


def _worker_emit_sentinel(sentinel: str) -> str:
    logging.getLogger("test.worker").info(sentinel)
    return "done"


def test_worker_logs_reach_main_process():
    log_queue, listener = setup_main_logging()
    captured = _capture(listener)
    try:
        sentinel = f"SENTINEL_{time.monotonic_ns()}"
        with ProcessPoolExecutor(
            max_workers=1,
            initializer=worker_log_initializer,
            initargs=(log_queue,),
        ) as pool:
            pool.submit(_worker_emit_sentinel, sentinel).result(timeout=10)

        time.sleep(1.0)
        output = captured.getvalue()
        assert sentinel in output, f"Expected '{sentinel}' in captured output: {output!r}"
    finally:
        stop_logging(listener)


def _worker_emit_file_msg() -> int:
    logging.getLogger("test.file").info("file-test-message")
    return os.getpid()


def _worker_file_initializer(log_queue: mp.Queue, log_dir: str) -> None:
    worker_log_initializer(log_queue, log_dir=Path(log_dir))


def test_per_worker_log_file_created(tmp_path: Path):
    log_queue, listener = setup_main_logging()
    try:
        with ProcessPoolExecutor(
            max_workers=1,
            initializer=_worker_file_initializer,
            initargs=(log_queue, str(tmp_path)),
        ) as pool:
            worker_pid = pool.submit(_worker_emit_file_msg).result(timeout=10)

        log_file = tmp_path / f"worker_{worker_pid}.log"
        assert log_file.exists(), f"Expected {log_file}, found: {list(tmp_path.iterdir())}"
        assert "file-test-message" in log_file.read_text()
    finally:
        stop_logging(listener)


def test_stop_logging_idempotent():
    _, listener = setup_main_logging()
    stop_logging(listener)
    stop_logging(listener)
