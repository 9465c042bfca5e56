"""Store service: pluggable backend contract, TCP server, remote client.

Any object with the five operations below (put/get/scan/delete/stats, with
HybridMetaStore's semantics) can be served over the wire or driven by the
bench replayer; the remote client itself satisfies the same contract, so a
benchmark cannot tell a local store from a served one apart from latency.

Per-connection ordering: the server answers each connection's requests
strictly in arrival order, one response frame per request frame. Requests on
different connections interleave arbitrarily. The remote client keeps one
connection per calling thread, so concurrent workers never share a socket.

Transport failures (connect/reset/timeout/undecodable response) raise
TransportError; they are never reported as a miss.
"""

from __future__ import annotations

import socket
import socketserver
import threading
from typing import Protocol, runtime_checkable

from . import protocol as wire
from .store import BadRangeError, IndexStats
from .protocol import (
    DeleteRequest,
    GetRequest,
    ProtocolError,
    PutRequest,
    ScanRequest,
    StatsRequest,
)

_UNLIMITED = 0xFFFFFFFF  # u32 max_results sentinel: effectively no truncation


class TransportError(Exception):
    """The remote exchange failed (network, timeout, or decode error)."""


@runtime_checkable
class Backend(Protocol):
    """The abstract store contract shared by all backends."""

    def put(self, key: bytes, value: int) -> int | None: ...

    def get(self, key: bytes) -> int | None: ...

    def scan(
        self, start: bytes, end_exclusive: bytes, max_results: int | None = None
    ) -> list[tuple[bytes, int]]: ...

    def delete(self, key: bytes) -> bool: ...

    def stats(self) -> IndexStats: ...


def _apply(backend: Backend, req) -> wire.Response:
    if isinstance(req, PutRequest):
        return wire.PutResponse(wire.ST_OK, backend.put(req.key, req.value))
    if isinstance(req, GetRequest):
        value = backend.get(req.key)
        if value is None:
            return wire.GetResponse(wire.ST_NOT_FOUND)
        return wire.GetResponse(wire.ST_OK, value)
    if isinstance(req, ScanRequest):
        entries = backend.scan(req.start, req.end_exclusive, req.max_results)
        return wire.ScanResponse(wire.ST_OK, tuple(entries))
    if isinstance(req, DeleteRequest):
        return wire.DeleteResponse(wire.ST_OK, backend.delete(req.key))
    if isinstance(req, StatsRequest):
        return wire.StatsResponse(wire.ST_OK, backend.stats())
    raise ProtocolError(f"unhandled request {req!r}")


class _Handler(socketserver.BaseRequestHandler):
    IDLE_POLL_S = 0.2

    def handle(self) -> None:
        sock = self.request
        server: _TcpServer = self.server  # type: ignore[assignment]
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while not server.stop_event.is_set():
            sock.settimeout(self.IDLE_POLL_S)
            try:
                first = sock.recv(1)
            except TimeoutError:
                continue
            except OSError:
                return
            if not first:
                return
            # A frame has started: finish reading it without idle polling.
            sock.settimeout(30.0)
            try:
                header = first + wire.recv_exact(sock, 4)
                length = int.from_bytes(header[:4], "big")
                opcode = header[4]
                if length > wire.MAX_PAYLOAD:
                    # Framing cannot be trusted past this point; reject and drop.
                    sock.sendall(wire.error_response_frame(opcode, wire.ST_BAD_REQUEST))
                    return
                payload = wire.recv_exact(sock, length) if length else b""
            except (OSError, ConnectionError):
                return
            try:
                sock.sendall(self._respond(server.backend, opcode, payload))
            except OSError:
                return

    @staticmethod
    def _respond(backend: Backend, opcode: int, payload: bytes) -> bytes:
        try:
            req = wire.decode_request(opcode, payload)
        except ProtocolError:
            return wire.error_response_frame(opcode, wire.ST_BAD_REQUEST)
        try:
            resp = _apply(backend, req)
            return wire.encode_frame(opcode, wire.encode_response(resp))
        except BadRangeError:
            return wire.error_response_frame(opcode, wire.ST_BAD_REQUEST)
        except Exception:
            return wire.error_response_frame(opcode, wire.ST_INTERNAL)


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, address, handler, backend: Backend, stop_event: threading.Event):
        self.backend = backend
        self.stop_event = stop_event
        super().__init__(address, handler)


class StoreServer:
    """A running store service; stop() drains in-flight requests."""

    def __init__(self, address: tuple[str, int], backend: Backend):
        self.backend = backend
        self._stop = threading.Event()
        self._server = _TcpServer(address, _Handler, backend, self._stop)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "StoreServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=10.0)

    def __enter__(self) -> "StoreServer":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(address: tuple[str, int], backend: Backend) -> StoreServer:
    """Bind and start serving the backend; returns the running handle.

    Bind failures propagate as OSError. Use port 0 to let the OS pick, then
    read the actual port from handle.address.
    """
    return StoreServer(address, backend).start()


class RemoteBackend:
    """Backend adapter speaking the wire protocol over TCP.

    One connection per calling thread; an op maps to exactly one
    request/response exchange. Safe for concurrent use by multiple workers.
    """

    def __init__(self, host: str, port: int, timeout: float = 1.0):
        self._addr = (host, port)
        self._timeout = timeout
        self._local = threading.local()
        self._conns: list[socket.socket] = []
        self._conns_lock = threading.Lock()

    def _conn(self) -> socket.socket:
        sock = getattr(self._local, "sock", None)
        if sock is None:
            try:
                sock = socket.create_connection(self._addr, timeout=self._timeout)
            except OSError as exc:
                raise TransportError(f"connect to {self._addr} failed: {exc}") from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.sock = sock
            with self._conns_lock:
                self._conns.append(sock)
        return sock

    def _drop(self) -> None:
        sock = getattr(self._local, "sock", None)
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass
            self._local.sock = None
            with self._conns_lock:
                if sock in self._conns:
                    self._conns.remove(sock)

    def _call(self, req: wire.Request) -> wire.Response:
        sock = self._conn()
        expected_op = wire.REQUEST_OPCODE[type(req)]
        try:
            sock.sendall(wire.encode_request(req))
            frame = wire.read_frame(sock)
        except (TimeoutError, OSError, ConnectionError) as exc:
            self._drop()
            raise TransportError(f"exchange failed: {exc}") from exc
        if frame is None:
            self._drop()
            raise TransportError("connection closed by server")
        opcode, payload = frame
        if opcode != expected_op:
            self._drop()
            raise TransportError(f"response opcode {opcode} != request {expected_op}")
        try:
            resp = wire.decode_response(opcode, payload)
        except ProtocolError as exc:
            self._drop()
            raise TransportError(f"response decode failed: {exc}") from exc
        if resp.status == wire.ST_INTERNAL:
            raise TransportError("server reported an internal error")
        if resp.status == wire.ST_BAD_REQUEST:
            raise TransportError("server rejected the request as malformed")
        return resp

    def put(self, key: bytes, value: int) -> int | None:
        return self._call(PutRequest(key, value)).old_value

    def get(self, key: bytes) -> int | None:
        resp = self._call(GetRequest(key))
        return None if resp.status == wire.ST_NOT_FOUND else resp.value

    def scan(
        self, start: bytes, end_exclusive: bytes, max_results: int | None = None
    ) -> list[tuple[bytes, int]]:
        if start >= end_exclusive:
            raise BadRangeError("scan start must be < end_exclusive")
        mx = _UNLIMITED if max_results is None else max_results
        if not 0 <= mx <= _UNLIMITED:
            raise ValueError("max_results out of u32 range")
        return list(self._call(ScanRequest(start, end_exclusive, mx)).entries)

    def delete(self, key: bytes) -> bool:
        return self._call(DeleteRequest(key)).removed

    def stats(self) -> IndexStats:
        resp = self._call(StatsRequest())
        assert resp.stats is not None
        return resp.stats

    def close(self) -> None:
        with self._conns_lock:
            conns, self._conns = self._conns, []
        for sock in conns:
            try:
                sock.close()
            except OSError:
                pass

    def __enter__(self) -> "RemoteBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def connect(endpoint: str | tuple[str, int], timeout: float = 1.0) -> RemoteBackend:
    """Remote backend for 'host:port' (or a (host, port) tuple)."""
    if isinstance(endpoint, str):
        host, _, port = endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
        return RemoteBackend(host, int(port), timeout)
    return RemoteBackend(endpoint[0], endpoint[1], timeout)
