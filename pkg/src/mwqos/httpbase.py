"""Shared HTTP plumbing for the pipeline stages.

Every stage is a ThreadingHTTPServer bound to an ephemeral port by default;
one handler thread per in-flight request. Connections are not kept alive,
which keeps the per-request accounting simple at emulation scale.
"""

from __future__ import annotations

import http.client
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Mapping

Address = tuple[str, int]


class UpstreamError(Exception):
    """The upstream hop could not be reached or answered garbage."""


# Headers that must not be blindly copied across a proxy hop.
_HOP_BY_HOP = {
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailers",
    "transfer-encoding",
    "upgrade",
    "host",
    "content-length",
}


def forwardable_headers(headers: Mapping[str, str]) -> dict[str, str]:
    return {k: v for k, v in headers.items() if k.lower() not in _HOP_BY_HOP}


def proxy_request(
    upstream: Address,
    method: str,
    path: str,
    headers: Mapping[str, str],
    body: bytes,
    timeout: float = 60.0,
) -> tuple[int, dict[str, str], bytes]:
    """Send the request to ``upstream`` and return (status, headers, body).

    Raises UpstreamError on connection failures or timeouts.
    """
    conn = http.client.HTTPConnection(upstream[0], upstream[1], timeout=timeout)
    try:
        out_headers = forwardable_headers(headers)
        out_headers["Connection"] = "close"
        conn.request(method, path, body=body or None, headers=out_headers)
        resp = conn.getresponse()
        payload = resp.read()
        resp_headers = {k: v for k, v in resp.getheaders() if k.lower() not in _HOP_BY_HOP}
        return resp.status, resp_headers, payload
    except (OSError, http.client.HTTPException) as exc:
        raise UpstreamError(f"{upstream[0]}:{upstream[1]}: {exc}") from exc
    finally:
        conn.close()


def http_json(
    method: str,
    address: Address,
    path: str,
    payload: Any | None = None,
    timeout: float = 10.0,
) -> tuple[int, Any]:
    """One-shot JSON exchange with a component admin endpoint."""
    body = json.dumps(payload).encode() if payload is not None else b""
    headers = {"Content-Type": "application/json", "Connection": "close"}
    status, _, raw = proxy_request(address, method, path, headers, body, timeout=timeout)
    data = json.loads(raw) if raw else None
    return status, data


class Handler(BaseHTTPRequestHandler):
    """Base handler: quiet logging, JSON helpers, full-body reads."""

    protocol_version = "HTTP/1.1"
    server_version = "mwqos"

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
        pass

    def read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def header_map(self) -> dict[str, str]:
        return dict(self.headers.items())

    def respond(
        self,
        status: int,
        body: bytes = b"",
        headers: Mapping[str, str] | None = None,
        content_type: str = "text/plain",
    ) -> None:
        try:
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Connection", "close")
            for name, value in (headers or {}).items():
                self.send_header(name, value)
            self.end_headers()
            if body:
                self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client went away; nothing sensible to do

    def respond_json(
        self, status: int, payload: Any, headers: Mapping[str, str] | None = None
    ) -> None:
        self.respond(
            status,
            json.dumps(payload).encode(),
            headers=headers,
            content_type="application/json",
        )

    def relay(self, status: int, headers: Mapping[str, str], body: bytes) -> None:
        """Relay an upstream response to the original client."""
        try:
            self.send_response(status)
            for name, value in headers.items():
                self.send_header(name, value)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Connection", "close")
            self.end_headers()
            if body:
                self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            pass


class ComponentServer:
    """Lifecycle wrapper around a ThreadingHTTPServer.

    Subclasses provide ``handler_class`` returning a Handler subclass bound
    to the component instance.
    """

    name = "component"

    def __init__(self, host: str = "127.0.0.1", port: int = 0) -> None:
        self._host = host
        self._port = port
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        self.stop_event = threading.Event()

    def handler_class(self) -> type[Handler]:
        raise NotImplementedError

    @property
    def address(self) -> Address:
        if self._httpd is None:
            raise RuntimeError(f"{self.name} not started")
        return self._httpd.server_address[0], self._httpd.server_address[1]

    def start(self) -> Address:
        if self._httpd is not None:
            return self.address

        class _Server(ThreadingHTTPServer):
            daemon_threads = True
            allow_reuse_address = True
            request_queue_size = 512

        self._httpd = _Server((self._host, self._port), self.handler_class())
        self._thread = threading.Thread(
            target=self._httpd.serve_forever,
            kwargs={"poll_interval": 0.05},
            name=f"{self.name}-server",
            daemon=True,
        )
        self._thread.start()
        return self.address

    def stop(self) -> None:
        self.stop_event.set()
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self) -> "ComponentServer":
        self.start()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.stop()


def parse_hostport(value: str, default_port: int = 80) -> Address:
    """Parse ``host:port`` (port optional) into an address tuple."""
    if ":" in value:
        host, _, port = value.rpartition(":")
        return host or "127.0.0.1", int(port)
    return value, default_port
