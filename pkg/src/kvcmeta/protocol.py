"""Binary wire protocol for the store service.

Frames are length-prefixed: a big-endian u32 payload byte count, one opcode
byte, then the payload (at most 16 MiB). Every request frame yields exactly
one response frame on the same connection, carrying the request's opcode; the
first response payload byte is a status code.

Request payloads (all integers big-endian, keys fixed 32 bytes, values u64):

    PUT    = 1   key(32) value(8)
    GET    = 2   key(32)
    SCAN   = 3   start(32) end_exclusive(32) max_results(u32)
    DELETE = 4   key(32)
    STATS  = 5   (empty)

Response payloads, after the status byte (OK=0, NOT_FOUND=1, BAD_REQUEST=2,
INTERNAL=3):

    PUT    -> had_previous(u8), then old value(8) iff 1
    GET    -> value(8) on OK; empty on NOT_FOUND
    SCAN   -> count(u32), then count x (key(32) value(8))
    DELETE -> removed(u8)
    STATS  -> 8 x u64 counters in IndexStats field order

Error statuses (BAD_REQUEST, INTERNAL) carry the status byte only.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

from .store import IndexStats, KEY_BYTES

MAX_PAYLOAD = 16 * 1024 * 1024

OP_PUT = 1
OP_GET = 2
OP_SCAN = 3
OP_DELETE = 4
OP_STATS = 5

ST_OK = 0
ST_NOT_FOUND = 1
ST_BAD_REQUEST = 2
ST_INTERNAL = 3

_HEADER = struct.Struct(">IB")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_STATS = struct.Struct(">8Q")


class ProtocolError(ValueError):
    """A frame or payload violates the wire format."""


@dataclass(frozen=True)
class PutRequest:
    key: bytes
    value: int


@dataclass(frozen=True)
class GetRequest:
    key: bytes


@dataclass(frozen=True)
class ScanRequest:
    start: bytes
    end_exclusive: bytes
    max_results: int


@dataclass(frozen=True)
class DeleteRequest:
    key: bytes


@dataclass(frozen=True)
class StatsRequest:
    pass


@dataclass(frozen=True)
class PutResponse:
    status: int
    old_value: int | None = None


@dataclass(frozen=True)
class GetResponse:
    status: int
    value: int | None = None


@dataclass(frozen=True)
class ScanResponse:
    status: int
    entries: tuple[tuple[bytes, int], ...] = ()


@dataclass(frozen=True)
class DeleteResponse:
    status: int
    removed: bool = False


@dataclass(frozen=True)
class StatsResponse:
    status: int
    stats: IndexStats | None = None


Request = PutRequest | GetRequest | ScanRequest | DeleteRequest | StatsRequest
Response = PutResponse | GetResponse | ScanResponse | DeleteResponse | StatsResponse

REQUEST_OPCODE = {
    PutRequest: OP_PUT,
    GetRequest: OP_GET,
    ScanRequest: OP_SCAN,
    DeleteRequest: OP_DELETE,
    StatsRequest: OP_STATS,
}


def _check_key(key: bytes, what: str = "key") -> bytes:
    if len(key) != KEY_BYTES:
        raise ProtocolError(f"{what} must be {KEY_BYTES} bytes, got {len(key)}")
    return key


def encode_frame(opcode: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return _HEADER.pack(len(payload), opcode) + payload


def decode_frame(buf: bytes) -> tuple[int, bytes, int]:
    """Decode one frame from the head of buf: (opcode, payload, bytes consumed).

    Raises ProtocolError if the buffer is short or the length is oversized.
    """
    if len(buf) < _HEADER.size:
        raise ProtocolError("truncated frame header")
    length, opcode = _HEADER.unpack_from(buf)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds {MAX_PAYLOAD}")
    end = _HEADER.size + length
    if len(buf) < end:
        raise ProtocolError("truncated frame payload")
    return opcode, buf[_HEADER.size:end], end


def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly n bytes; ConnectionError if the peer closes early."""
    chunks = bytearray()
    while len(chunks) < n:
        part = sock.recv(n - len(chunks))
        if not part:
            raise ConnectionError("connection closed mid-frame")
        chunks.extend(part)
    return bytes(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    """Read one frame; None on clean EOF at a frame boundary."""
    first = sock.recv(1)
    if not first:
        return None
    header = first + recv_exact(sock, _HEADER.size - 1)
    length, opcode = _HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds {MAX_PAYLOAD}")
    payload = recv_exact(sock, length) if length else b""
    return opcode, payload


def encode_request(req: Request) -> bytes:
    """Full request frame for any request message."""
    if isinstance(req, PutRequest):
        payload = _check_key(req.key) + _U64.pack(req.value)
    elif isinstance(req, GetRequest):
        payload = _check_key(req.key)
    elif isinstance(req, ScanRequest):
        payload = (
            _check_key(req.start, "start")
            + _check_key(req.end_exclusive, "end_exclusive")
            + _U32.pack(req.max_results)
        )
    elif isinstance(req, DeleteRequest):
        payload = _check_key(req.key)
    elif isinstance(req, StatsRequest):
        payload = b""
    else:
        raise ProtocolError(f"not a request message: {req!r}")
    return encode_frame(REQUEST_OPCODE[type(req)], payload)


def decode_request(opcode: int, payload: bytes) -> Request:
    """Parse a request payload; ProtocolError on unknown opcode or bad size."""
    if opcode == OP_PUT:
        if len(payload) != KEY_BYTES + 8:
            raise ProtocolError(f"PUT payload must be {KEY_BYTES + 8} bytes")
        return PutRequest(payload[:KEY_BYTES], _U64.unpack_from(payload, KEY_BYTES)[0])
    if opcode == OP_GET:
        if len(payload) != KEY_BYTES:
            raise ProtocolError(f"GET payload must be {KEY_BYTES} bytes")
        return GetRequest(payload)
    if opcode == OP_SCAN:
        if len(payload) != 2 * KEY_BYTES + 4:
            raise ProtocolError(f"SCAN payload must be {2 * KEY_BYTES + 4} bytes")
        return ScanRequest(
            payload[:KEY_BYTES],
            payload[KEY_BYTES : 2 * KEY_BYTES],
            _U32.unpack_from(payload, 2 * KEY_BYTES)[0],
        )
    if opcode == OP_DELETE:
        if len(payload) != KEY_BYTES:
            raise ProtocolError(f"DELETE payload must be {KEY_BYTES} bytes")
        return DeleteRequest(payload)
    if opcode == OP_STATS:
        if payload:
            raise ProtocolError("STATS payload must be empty")
        return StatsRequest()
    raise ProtocolError(f"unknown opcode {opcode}")


def encode_response(resp: Response) -> bytes:
    """Response payload bytes (status byte first)."""
    status = bytes([resp.status])
    if resp.status in (ST_BAD_REQUEST, ST_INTERNAL):
        return status
    if isinstance(resp, PutResponse):
        if resp.old_value is None:
            return status + b"\x00"
        return status + b"\x01" + _U64.pack(resp.old_value)
    if isinstance(resp, GetResponse):
        if resp.status == ST_OK:
            if resp.value is None:
                raise ProtocolError("GET OK response requires a value")
            return status + _U64.pack(resp.value)
        return status
    if isinstance(resp, ScanResponse):
        parts = [status, _U32.pack(len(resp.entries))]
        for key, value in resp.entries:
            parts.append(_check_key(key))
            parts.append(_U64.pack(value))
        return b"".join(parts)
    if isinstance(resp, DeleteResponse):
        return status + (b"\x01" if resp.removed else b"\x00")
    if isinstance(resp, StatsResponse):
        if resp.stats is None:
            raise ProtocolError("STATS OK response requires counters")
        s = resp.stats
        return status + _STATS.pack(
            s.puts,
            s.gets,
            s.scans,
            s.deletes,
            s.cache_hits,
            s.cache_misses,
            s.resident_entries,
            s.cache_entries,
        )
    raise ProtocolError(f"not a response message: {resp!r}")


def decode_response(opcode: int, payload: bytes) -> Response:
    """Parse a response payload for the given request opcode."""
    if not payload:
        raise ProtocolError("empty response payload")
    status = payload[0]
    body = payload[1:]
    if status in (ST_BAD_REQUEST, ST_INTERNAL):
        if body:
            raise ProtocolError("error response carries no body")
        cls = _ERROR_RESPONSE.get(opcode)
        if cls is None:
            raise ProtocolError(f"unknown opcode {opcode}")
        return cls(status)
    if status not in (ST_OK, ST_NOT_FOUND):
        raise ProtocolError(f"unknown status {status}")

    if opcode == OP_PUT:
        if len(body) < 1:
            raise ProtocolError("PUT response missing had_previous flag")
        if body[0] == 0:
            if len(body) != 1:
                raise ProtocolError("PUT response trailing bytes")
            return PutResponse(status)
        if body[0] != 1 or len(body) != 9:
            raise ProtocolError("malformed PUT response")
        return PutResponse(status, _U64.unpack_from(body, 1)[0])
    if opcode == OP_GET:
        if status == ST_OK:
            if len(body) != 8:
                raise ProtocolError("GET OK response must carry 8 value bytes")
            return GetResponse(status, _U64.unpack(body)[0])
        if body:
            raise ProtocolError("GET NOT_FOUND response carries no body")
        return GetResponse(status)
    if opcode == OP_SCAN:
        if len(body) < 4:
            raise ProtocolError("SCAN response missing count")
        count = _U32.unpack_from(body)[0]
        expected = 4 + count * (KEY_BYTES + 8)
        if len(body) != expected:
            raise ProtocolError("SCAN response length mismatch")
        entries = []
        off = 4
        for _ in range(count):
            key = body[off : off + KEY_BYTES]
            value = _U64.unpack_from(body, off + KEY_BYTES)[0]
            entries.append((key, value))
            off += KEY_BYTES + 8
        return ScanResponse(status, tuple(entries))
    if opcode == OP_DELETE:
        if len(body) != 1 or body[0] > 1:
            raise ProtocolError("malformed DELETE response")
        return DeleteResponse(status, bool(body[0]))
    if opcode == OP_STATS:
        if len(body) != _STATS.size:
            raise ProtocolError(f"STATS response must carry {_STATS.size} bytes")
        return StatsResponse(status, IndexStats(*_STATS.unpack(body)))
    raise ProtocolError(f"unknown opcode {opcode}")


_ERROR_RESPONSE = {
    OP_PUT: PutResponse,
    OP_GET: GetResponse,
    OP_SCAN: ScanResponse,
    OP_DELETE: DeleteResponse,
    OP_STATS: StatsResponse,
}


def error_response_frame(opcode: int, status: int) -> bytes:
    """A bare-status response frame, echoing the (possibly unknown) opcode."""
    return encode_frame(opcode, bytes([status]))
