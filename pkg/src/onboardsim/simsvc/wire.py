"""Newline-delimited JSON protocol over a local socket.

Message schema (version 1), one JSON object per line:

  request:  {"v": 1, "kind": <str>, "request_id": <str>, ...}
    kind "onboarding":     {"account_id", "op", "payload"}
    kind "create_account": {"seed", "account_id"?}
    kind "read":           {"account_id"}
    kind "isolation":      {}
  response: {"v": 1, "request_id": <str>, "status": "ok"|"error",
             "payload"| "error"+"code"}
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading

from .service import OnboardingService, ServiceError

WIRE_VERSION = 1


def handle_message(service: OnboardingService, message: dict) -> dict:
    request_id = message.get("request_id")
    base = {"v": WIRE_VERSION, "request_id": request_id}
    try:
        if message.get("v") != WIRE_VERSION:
            raise ServiceError("bad-version", f"unsupported protocol version {message.get('v')}")
        kind = message.get("kind")
        if kind == "onboarding":
            payload = service.serve_onboarding({
                "account_id": message.get("account_id"),
                "op": message.get("op"),
                "payload": message.get("payload"),
                "request_id": request_id,
            })
        elif kind == "create_account":
            account = service.create_account(
                message["seed"], account_id=message.get("account_id"))
            payload = {"account_id": account.account_id, "simulated": account.simulated}
        elif kind == "read":
            payload = service.udss_read(message["account_id"])
        elif kind == "isolation":
            payload = service.isolation_report()
        else:
            raise ServiceError("bad-kind", f"unknown message kind {kind!r}")
    except ServiceError as exc:
        return {**base, "status": "error", "code": exc.code, "error": str(exc)}
    except (KeyError, TypeError, ValueError) as exc:
        return {**base, "status": "error", "code": "bad-request", "error": str(exc)}
    return {**base, "status": "ok", "payload": payload}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            try:
                message = json.loads(line)
            except json.JSONDecodeError as exc:
                reply = {"v": WIRE_VERSION, "request_id": None,
                         "status": "error", "code": "bad-json", "error": str(exc)}
            else:
                with self.server.service_lock:
                    reply = handle_message(self.server.service, message)
            self.wfile.write(json.dumps(reply, sort_keys=True).encode() + b"\n")
            self.wfile.flush()


class ServiceServer:
    """Threaded local-socket front end over one service instance."""

    def __init__(self, service: OnboardingService, host: str = "127.0.0.1", port: int = 0):
        self._server = socketserver.ThreadingTCPServer((host, port), _Handler)
        self._server.daemon_threads = True
        self._server.service = service
        self._server.service_lock = threading.Lock()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class ServiceClient:
    """Blocking line-oriented client for the wire protocol."""

    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port))
        self._file = self._sock.makefile("rwb")
        self._next_id = 0

    def request(self, kind: str, **fields) -> dict:
        self._next_id += 1
        message = {"v": WIRE_VERSION, "kind": kind,
                   "request_id": f"c{self._next_id}", **fields}
        self._file.write(json.dumps(message, sort_keys=True).encode() + b"\n")
        self._file.flush()
        line = self._file.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def close(self) -> None:
        self._file.close()
        self._sock.close()
