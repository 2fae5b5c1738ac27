"""Tests for the in-process and HTTP VIRM clients without a live socket."""

from __future__ import annotations

import httpx
import pytest

from virm_sim.client import HttpVirmClient, LocalVirmClient, VirmClient, valid_identity
from virm_sim.exceptions import BadStateError, VirmError


class TestValidIdentity:
    def test_accepts_service_identity(self, service):
        assert valid_identity(service.identity())

    @pytest.mark.parametrize(
        "body",
        [
            None,
            [],
            {"service": "nginx"},
            {"service": "virm", "api_version": "2"},
            {"api_version": "1"},
        ],
    )
    def test_rejects_anything_else(self, body):
        assert not valid_identity(body)


class TestLocalClient:
    def test_satisfies_protocol(self, local_client):
        assert isinstance(local_client, VirmClient)

    def test_on_call_sees_each_mutation(self, service, domain):
        calls = []
        client = LocalVirmClient(service, on_call=lambda m, t: calls.append((m, t)))
        ws = client.request_diskspace("slc4", 10, domain).workspace_id
        client.mount_diskspace(ws)
        client.write_file(ws, "motd", "hi")
        client.get_workspace(ws)
        assert calls == [
            ("request_diskspace", "dom1"),
            ("mount_diskspace", ws),
            ("write_file", f"{ws}/motd"),
        ]

    def test_errors_propagate_unchanged(self, local_client, domain):
        ws = local_client.request_diskspace("slc4", 10, domain).workspace_id
        with pytest.raises(BadStateError):
            local_client.start_vm(ws)


class TestHttpClient:
    def test_satisfies_protocol(self):
        client = HttpVirmClient(transport=httpx.MockTransport(lambda r: httpx.Response(200)))
        assert isinstance(client, VirmClient)
        client.close()

    def test_transport_failure_is_virm_error(self):
        def refuse(request: httpx.Request) -> httpx.Response:
            raise httpx.ConnectError("connection refused", request=request)

        with HttpVirmClient(transport=httpx.MockTransport(refuse)) as client:
            with pytest.raises(VirmError, match="failed"):
                client.identity()

    def test_unknown_error_code_falls_back(self):
        def teapot(request: httpx.Request) -> httpx.Response:
            return httpx.Response(418, json={"error_code": "TEAPOT", "detail": "short and stout"})

        with HttpVirmClient(transport=httpx.MockTransport(teapot)) as client:
            with pytest.raises(VirmError, match="short and stout") as exc_info:
                client.identity()
        assert type(exc_info.value) is VirmError
        assert exc_info.value.details["error_code"] == "TEAPOT"

    def test_non_json_error(self):
        def broken(request: httpx.Request) -> httpx.Response:
            return httpx.Response(502, text="bad gateway")

        with HttpVirmClient(transport=httpx.MockTransport(broken)) as client:
            with pytest.raises(VirmError, match="HTTP 502"):
                client.identity()

    def test_request_paths(self):
        seen = []

        def record(request: httpx.Request) -> httpx.Response:
            seen.append((request.method, request.url.path))
            return httpx.Response(200, json={"teardown_s": 90.0, "expires_at": 120.0})

        with HttpVirmClient(transport=httpx.MockTransport(record)) as client:
            assert client.stop_vm("ws-0001") == 90.0
            assert client.heartbeat("ws-0001") == 120.0
            client.remove_diskspace("ws-0001")
        assert seen == [
            ("POST", "/v1/workspace/ws-0001/stop"),
            ("POST", "/v1/workspace/ws-0001/heartbeat"),
            ("DELETE", "/v1/workspace/ws-0001"),
        ]
