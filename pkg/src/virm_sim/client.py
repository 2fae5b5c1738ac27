"""Clients a pilot uses to talk to the VIRM service.

:class:`LocalVirmClient` calls an in-process service directly (the harness);
:class:`HttpVirmClient` speaks the loopback wire via httpx and maps error
responses back onto the same exception classes.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from typing import Protocol, runtime_checkable

import httpx

from .exceptions import VIRM_ERRORS, VirmError
from .service import API_VERSION, SERVICE_NAME, Provisioned, VirmService
from .types import DomainConfig

logger = logging.getLogger(__name__)

DEFAULT_URL = "http://127.0.0.1:18700"


def valid_identity(body: object) -> bool:
    """True for a well-formed VIRM identity response."""
    return (
        isinstance(body, dict)
        and body.get("service") == SERVICE_NAME
        and str(body.get("api_version")) == API_VERSION
    )


@runtime_checkable
class VirmClient(Protocol):
    """The VIRM API as seen from a pilot."""

    def identity(self) -> dict: ...

    def request_diskspace(
        self, image_id: str, size_gb: float, domain: DomainConfig
    ) -> Provisioned: ...

    def mount_diskspace(self, workspace_id: str) -> None: ...

    def unmount_diskspace(self, workspace_id: str) -> None: ...

    def write_file(self, workspace_id: str, name: str, content: str) -> None: ...

    def list_files(self, workspace_id: str) -> dict[str, str]: ...

    def start_vm(self, workspace_id: str) -> None: ...

    def stop_vm(self, workspace_id: str) -> float: ...

    def remove_diskspace(self, workspace_id: str) -> None: ...

    def heartbeat(self, workspace_id: str) -> float: ...

    def get_workspace(self, workspace_id: str) -> dict: ...


class LocalVirmClient:
    """Direct calls into a :class:`VirmService` living in the same process.

    *on_call* is invoked as ``on_call(method, target)`` before each call.
    """

    def __init__(
        self,
        service: VirmService,
        on_call: Callable[[str, str], None] | None = None,
    ) -> None:
        self.service = service
        self._on_call = on_call

    def _note(self, method: str, target: str) -> None:
        if self._on_call is not None:
            self._on_call(method, target)

    def identity(self) -> dict:
        return self.service.identity()

    def request_diskspace(self, image_id: str, size_gb: float, domain: DomainConfig) -> Provisioned:
        self._note("request_diskspace", domain.domain_id)
        return self.service.request_diskspace(image_id, size_gb, domain)

    def mount_diskspace(self, workspace_id: str) -> None:
        self._note("mount_diskspace", workspace_id)
        self.service.mount_diskspace(workspace_id)

    def unmount_diskspace(self, workspace_id: str) -> None:
        self._note("unmount_diskspace", workspace_id)
        self.service.unmount_diskspace(workspace_id)

    def write_file(self, workspace_id: str, name: str, content: str) -> None:
        self._note("write_file", f"{workspace_id}/{name}")
        self.service.write_file(workspace_id, name, content)

    def list_files(self, workspace_id: str) -> dict[str, str]:
        return self.service.list_files(workspace_id)

    def start_vm(self, workspace_id: str) -> None:
        self._note("start_vm", workspace_id)
        self.service.start_vm(workspace_id)

    def stop_vm(self, workspace_id: str) -> float:
        self._note("stop_vm", workspace_id)
        return self.service.stop_vm(workspace_id)

    def remove_diskspace(self, workspace_id: str) -> None:
        self._note("remove_diskspace", workspace_id)
        self.service.remove_diskspace(workspace_id)

    def heartbeat(self, workspace_id: str) -> float:
        self._note("heartbeat", workspace_id)
        return self.service.heartbeat(workspace_id)

    def get_workspace(self, workspace_id: str) -> dict:
        return self.service.get_workspace(workspace_id)


class HttpVirmClient:
    """VIRM API over HTTP.

    Transport failures surface as plain :class:`VirmError`; error responses
    are raised as the class registered for their ``error_code``.

    Example:
        >>> with HttpVirmClient("http://127.0.0.1:18700") as client:
        ...     client.identity()["service"]
        'virm'
    """

    def __init__(
        self,
        base_url: str = DEFAULT_URL,
        *,
        timeout: float = 10.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self._http = httpx.Client(
            base_url=self.base_url, timeout=httpx.Timeout(timeout), transport=transport
        )

    def __enter__(self) -> HttpVirmClient:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def close(self) -> None:
        self._http.close()

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        try:
            response = self._http.request(method, path, json=body)
        except httpx.HTTPError as exc:
            raise VirmError(f"{method} {path} failed: {exc}") from exc

        try:
            payload = response.json()
        except ValueError:
            payload = {}
        if response.is_success:
            return payload if isinstance(payload, dict) else {}

        code = payload.get("error_code") if isinstance(payload, dict) else None
        detail = payload.get("detail") if isinstance(payload, dict) else None
        error_cls = VIRM_ERRORS.get(code or "", VirmError)
        logger.debug("%s %s -> %d %s", method, path, response.status_code, code)
        raise error_cls(
            detail or f"{method} {path} returned HTTP {response.status_code}",
            details={"http_status": response.status_code, "error_code": code},
        )

    def identity(self) -> dict:
        return self._request("GET", "/v1/identity")

    def request_diskspace(self, image_id: str, size_gb: float, domain: DomainConfig) -> Provisioned:
        body = self._request(
            "POST",
            "/v1/workspace",
            {"image_id": image_id, "size_gb": size_gb, "domain": domain.to_dict()},
        )
        return Provisioned(str(body["workspace_id"]), float(body.get("setup_s", 0.0)))

    def mount_diskspace(self, workspace_id: str) -> None:
        self._request("POST", f"/v1/workspace/{workspace_id}/mount")

    def unmount_diskspace(self, workspace_id: str) -> None:
        self._request("POST", f"/v1/workspace/{workspace_id}/unmount")

    def write_file(self, workspace_id: str, name: str, content: str) -> None:
        self._request("PUT", f"/v1/workspace/{workspace_id}/files/{name}", {"content": content})

    def list_files(self, workspace_id: str) -> dict[str, str]:
        return dict(self._request("GET", f"/v1/workspace/{workspace_id}/files").get("files", {}))

    def start_vm(self, workspace_id: str) -> None:
        self._request("POST", f"/v1/workspace/{workspace_id}/start")

    def stop_vm(self, workspace_id: str) -> float:
        body = self._request("POST", f"/v1/workspace/{workspace_id}/stop")
        return float(body.get("teardown_s", 0.0))

    def remove_diskspace(self, workspace_id: str) -> None:
        self._request("DELETE", f"/v1/workspace/{workspace_id}")

    def heartbeat(self, workspace_id: str) -> float:
        return float(self._request("POST", f"/v1/workspace/{workspace_id}/heartbeat")["expires_at"])

    def get_workspace(self, workspace_id: str) -> dict:
        return self._request("GET", f"/v1/workspace/{workspace_id}")

    # -- virtual clock (harness infrastructure) --------------------------

    def clock_now(self) -> float:
        return float(self._request("GET", "/v1/_clock")["now"])

    def advance_clock(self, seconds: float) -> float:
        return float(self._request("POST", "/v1/_clock", {"advance_s": seconds})["now"])

    def advance_clock_to(self, t: float) -> float:
        return float(self._request("POST", "/v1/_clock", {"to": t})["now"])


class RemoteClock:
    """Clock view backed by the service's virtual clock."""

    def __init__(self, client: HttpVirmClient) -> None:
        self._client = client

    def now(self) -> float:
        return self._client.clock_now()

    def advance(self, seconds: float) -> float:
        return self._client.advance_clock(seconds)

    def advance_to(self, t: float) -> float:
        return self._client.advance_clock_to(t)
