"""HTTP/1.1 JSON wire for the VIRM service, loopback only.

Routes:
    GET    /v1/identity
    POST   /v1/workspace                      {image_id, size_gb, domain}
    GET    /v1/workspace/{id}
    DELETE /v1/workspace/{id}
    POST   /v1/workspace/{id}/mount|unmount|start|stop|heartbeat
    PUT    /v1/workspace/{id}/files/{name}    {content}
    GET    /v1/workspace/{id}/files
    GET    /v1/_clock
    POST   /v1/_clock                         {advance_s} or {to}

The clock routes are test infrastructure: the harness (or a pilot driver)
ticks the shared virtual clock through them.

Every error leaves as ``{"error_code", "detail"}`` with the status of the
raised :class:`VirmError`.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from pathlib import Path

from flask import Flask, current_app, jsonify, request
from werkzeug.exceptions import HTTPException
from werkzeug.serving import make_server

from .environment import EnvironmentError, log_startup_diagnostics, validate_environment
from .exceptions import ScenarioValidationError, VirmError, VirmValidationError
from .logging_ import setup_main_logging, stop_logging
from .scenario import load_scenario
from .service import ServiceConfig, VirmService
from .types import DomainConfig, HeartbeatPolicy, MachineSpec, PerfParams

logger = logging.getLogger(__name__)


def _service() -> VirmService:
    return current_app.config["VIRM_SERVICE"]


def _body() -> dict:
    raw = request.get_data(cache=True)
    if not raw:
        return {}
    try:
        data = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise VirmValidationError(f"request body is not JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise VirmValidationError("request body must be a JSON object")
    return data


def _consume_body() -> None:
    # Read the whole body before routing; keep-alive reuses the stream.
    raw = request.headers.get("Content-Length")
    if raw is not None and not raw.strip().isdigit():
        raise VirmValidationError(f"malformed Content-Length {raw!r}")
    request.get_data(cache=True)


def _virm_error(exc: VirmError):
    logger.info("%s %s -> %s: %s", request.method, request.path, exc.error_code, exc)
    return jsonify(error_code=exc.error_code, detail=str(exc)), exc.http_status


def _http_error(exc: HTTPException):
    code = (exc.name or "HTTP_ERROR").upper().replace(" ", "_")
    detail = f"no route for {request.method} {request.path}" if exc.code == 404 else exc.description
    return jsonify(error_code=code, detail=detail), exc.code


def _unhandled(exc: Exception):
    logger.exception("Unhandled error serving %s %s", request.method, request.path)
    return jsonify(error_code="INTERNAL", detail=str(exc)), 500


def create_app(service: VirmService) -> Flask:
    """Flask app exposing *service* on the routes listed above."""
    app = Flask(__name__)
    app.config["VIRM_SERVICE"] = service
    app.before_request(_consume_body)
    app.register_error_handler(VirmError, _virm_error)
    app.register_error_handler(HTTPException, _http_error)
    app.register_error_handler(Exception, _unhandled)

    @app.get("/v1/identity")
    def identity():
        return jsonify(_service().identity())

    @app.get("/v1/_clock")
    def clock_now():
        return jsonify(now=_service().clock.now())

    @app.post("/v1/_clock")
    def clock_advance():
        body = _body()
        service = _service()
        try:
            if "to" in body:
                now = service.advance_clock_to(float(body["to"]))
            else:
                now = service.advance_clock(float(body.get("advance_s", 0.0)))
        except (TypeError, ValueError) as exc:
            raise VirmValidationError(f"bad clock request: {exc}") from exc
        return jsonify(now=now)

    @app.post("/v1/workspace")
    def request_diskspace():
        body = _body()
        try:
            domain = DomainConfig.from_dict(body["domain"])
            image_id = str(body["image_id"])
            size_gb = float(body["size_gb"])
        except (KeyError, TypeError, ValueError) as exc:
            raise VirmValidationError(f"malformed workspace request: {exc!r}") from exc
        receipt = _service().request_diskspace(image_id, size_gb, domain)
        return jsonify(workspace_id=receipt.workspace_id, setup_s=receipt.setup_s), 201

    @app.get("/v1/workspace/<ws>")
    def get_workspace(ws: str):
        return jsonify(_service().get_workspace(ws))

    @app.delete("/v1/workspace/<ws>")
    def remove_diskspace(ws: str):
        _service().remove_diskspace(ws)
        return jsonify({})

    @app.post("/v1/workspace/<ws>/mount")
    def mount_diskspace(ws: str):
        _service().mount_diskspace(ws)
        return jsonify({})

    @app.post("/v1/workspace/<ws>/unmount")
    def unmount_diskspace(ws: str):
        _service().unmount_diskspace(ws)
        return jsonify({})

    @app.post("/v1/workspace/<ws>/start")
    def start_vm(ws: str):
        _service().start_vm(ws)
        return jsonify({})

    @app.post("/v1/workspace/<ws>/stop")
    def stop_vm(ws: str):
        return jsonify(teardown_s=_service().stop_vm(ws))

    @app.post("/v1/workspace/<ws>/heartbeat")
    def heartbeat(ws: str):
        return jsonify(expires_at=_service().heartbeat(ws))

    @app.get("/v1/workspace/<ws>/files")
    def list_files(ws: str):
        return jsonify(files=_service().list_files(ws))

    @app.put("/v1/workspace/<ws>/files/<name>")
    def write_file(ws: str, name: str):
        content = _body().get("content")
        if not isinstance(content, str):
            raise VirmValidationError("file content must be a string", ws)
        _service().write_file(ws, name, content)
        return jsonify({})

    return app


class VirmHTTPServer:
    """Threaded werkzeug server running the VIRM app for one :class:`VirmService`.

    Port 0 binds an ephemeral port; read the real one from :attr:`url`.
    """

    def __init__(self, service: VirmService, host: str = "127.0.0.1", port: int = 0) -> None:
        self.service = service
        self.app = create_app(service)
        self._server = make_server(host, port, self.app, threaded=True)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def close(self) -> None:
        self._server.server_close()

    def start_background(self) -> threading.Thread:
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="virm-http", daemon=True
        )
        self._thread.start()
        logger.info("VIRM service listening on %s", self.url)
        return self._thread

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def service_from_config(config: ServiceConfig) -> VirmService:
    """Build a service for the host described by the configured scenario, if any."""
    if config.scenario_path is None:
        return VirmService(MachineSpec(), PerfParams(), HeartbeatPolicy())
    scenario = load_scenario(config.scenario_path)
    return VirmService(scenario.machine, scenario.perf_params, scenario.heartbeat)


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(
        prog="virm-service",
        description="Run the VIRM workspace service on the loopback interface",
        epilog="""
Examples:
  virm-service                           Listen on 127.0.0.1:18700
  virm-service --port 18800              Listen on another port
  virm-service --scenario conf_9.json    Size the host from a scenario file
  VIRM_PORT=18800 virm-service           Port from the environment
        """,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--host", default=None, help="Bind address (default: 127.0.0.1)")
    parser.add_argument("--port", type=int, default=None, help="Port (default: 18700)")
    parser.add_argument("--scenario", type=Path, default=None, help="Scenario JSON for the host")
    parser.add_argument("--log-dir", type=Path, default=None, help="Write virm.log here")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    args = parser.parse_args(argv)

    config = ServiceConfig.from_env(host=args.host, port=args.port, scenario_path=args.scenario)
    _queue, listener = setup_main_logging(args.log_dir, args.verbose)
    try:
        try:
            validate_environment(
                host=config.host, port=config.port, scenario_path=config.scenario_path
            )
        except EnvironmentError as e:
            logger.error("%s", e)
            sys.exit(2)
        log_startup_diagnostics(
            host=config.host, port=config.port, scenario=config.scenario_path
        )

        try:
            service = service_from_config(config)
        except ScenarioValidationError as e:
            logger.error("%s", e)
            sys.exit(2)

        server = VirmHTTPServer(service, config.host, config.port)
        logger.info("VIRM service listening on %s", server.url)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            logger.info("Shutting down")
        finally:
            server.close()
    finally:
        stop_logging(listener)


if __name__ == "__main__":
    main()
