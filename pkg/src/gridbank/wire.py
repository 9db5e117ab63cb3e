"""Framed message transport.

A frame is a 4-byte big-endian payload length followed by the canonical
encoding of one message. The same frames travel over TCP
(:class:`TcpNetwork`) or through an in-process loopback
(:class:`LocalNetwork`) that still encodes and decodes every frame, so
both paths exercise identical bytes.

Server-side logic is a *session*: an object with ``handle(message) -> reply``
and a ``closed`` attribute. A session that sets ``closed`` has its
connection dropped after the reply is sent.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from typing import Callable, Protocol

from .errors import GridBankError, SchemaViolation, UnreachableEndpoint, error_from_code
from .security import Identity, SignedEnvelope, canonical_decode, canonical_encode, sign

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024


class ConnectionClosed(GridBankError):
    code = "CONNECTION_CLOSED"


def encode_frame(message) -> bytes:
    payload = canonical_encode(message)
    if len(payload) > MAX_FRAME:
        raise SchemaViolation(f"frame of {len(payload)} bytes exceeds limit")
    return HEADER.pack(len(payload)) + payload


def decode_frame(frame: bytes):
    if len(frame) < HEADER.size:
        raise SchemaViolation("short frame")
    (n,) = HEADER.unpack_from(frame)
    if n != len(frame) - HEADER.size:
        raise SchemaViolation("frame length does not match header")
    return canonical_decode(frame[HEADER.size:])


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def recv_frame_bytes(sock: socket.socket) -> bytes | None:
    header = _recv_exact(sock, HEADER.size)
    if header is None:
        return None
    (n,) = HEADER.unpack(header)
    if n > MAX_FRAME:
        raise SchemaViolation(f"frame of {n} bytes exceeds limit")
    body = _recv_exact(sock, n)
    if body is None:
        return None
    return header + body


class Session(Protocol):
    closed: bool

    def handle(self, message) -> object: ...


SessionFactory = Callable[[], Session]


def _handle_bytes(session: Session, frame: bytes) -> bytes:
    try:
        message = decode_frame(frame)
    except SchemaViolation as exc:
        session.closed = True
        return encode_frame({"type": "error", "error": exc.to_wire()})
    return encode_frame(session.handle(message))


class Connection(Protocol):
    def request(self, message) -> object: ...

    def close(self) -> None: ...


class LocalConnection:
    def __init__(self, session: Session):
        self._session = session
        self._lock = threading.Lock()

    def request(self, message):
        return decode_frame(self.request_bytes(encode_frame(message)))

    def request_bytes(self, frame: bytes) -> bytes:
        with self._lock:
            if self._session.closed:
                raise ConnectionClosed("connection closed by peer")
            return _handle_bytes(self._session, frame)

    def close(self) -> None:
        self._session.closed = True


class TcpConnection:
    def __init__(self, endpoint: str, timeout: float = 10.0):
        host, port = parse_endpoint(endpoint)
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise UnreachableEndpoint(f"cannot connect to {endpoint}: {exc}") from exc
        self._lock = threading.Lock()

    def request(self, message):
        return decode_frame(self.request_bytes(encode_frame(message)))

    def request_bytes(self, frame: bytes) -> bytes:
        with self._lock:
            try:
                self._sock.sendall(frame)
                reply = recv_frame_bytes(self._sock)
            except OSError as exc:
                raise ConnectionClosed(f"connection lost: {exc}") from exc
            if reply is None:
                raise ConnectionClosed("connection closed by peer")
            return reply

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise SchemaViolation(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


class LocalNetwork:
    """In-process endpoint registry."""

    def __init__(self):
        self._factories: dict[str, SessionFactory] = {}

    def register(self, endpoint: str, factory: SessionFactory) -> None:
        self._factories[endpoint] = factory

    def unregister(self, endpoint: str) -> None:
        self._factories.pop(endpoint, None)

    def connect(self, endpoint: str) -> LocalConnection:
        try:
            factory = self._factories[endpoint]
        except KeyError:
            raise UnreachableEndpoint(f"nothing listening at {endpoint}") from None
        return LocalConnection(factory())


class TcpNetwork:
    def __init__(self, timeout: float = 10.0):
        self.timeout = timeout

    def connect(self, endpoint: str) -> TcpConnection:
        return TcpConnection(endpoint, self.timeout)


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        session = self.server.session_factory()
        sock = self.request
        while not session.closed:
            try:
                frame = recv_frame_bytes(sock)
            except (OSError, SchemaViolation):
                return
            if frame is None:
                return
            try:
                reply = _handle_bytes(session, frame)
            except Exception:
                log.exception("session handler failed")
                return
            try:
                sock.sendall(reply)
            except OSError:
                return


class FramedServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], session_factory: SessionFactory):
        self.session_factory = session_factory
        super().__init__(address, _FrameHandler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name=f"gridbank-{self.endpoint}", daemon=True)
        t.start()
        return t


# -- signed request/response messages ------------------------------------------

def request_message(identity: Identity, request_id: int, op: str, params: dict) -> dict:
    env = sign(identity, {"request_id": request_id, "op": op, "params": params})
    return {"type": "request", "envelope": env.to_wire()}


def parse_request(message) -> SignedEnvelope:
    if not isinstance(message, dict) or message.get("type") != "request" or set(message) != {"type", "envelope"}:
        raise SchemaViolation("expected a request frame")
    return SignedEnvelope.from_wire(message["envelope"])


def ok_response(request_id, result) -> dict:
    return {"type": "response", "request_id": request_id, "ok": True, "result": result}


def error_response(request_id, err: GridBankError) -> dict:
    wire = err.to_wire()
    details = {k: v for k, v in err.details.items() if isinstance(v, (int, str, dict, list))}
    if details:
        wire["details"] = details
    return {"type": "response", "request_id": request_id, "ok": False, "error": wire}


def raise_for_response(reply, request_id=None):
    if not isinstance(reply, dict):
        raise SchemaViolation("malformed reply")
    if reply.get("type") == "error" or (reply.get("type") == "refused"):
        e = reply.get("error", {})
        raise error_from_code(e.get("code", "CONNECTION_REFUSED"), e.get("message", ""))
    if reply.get("type") != "response":
        raise SchemaViolation(f"unexpected reply type {reply.get('type')!r}")
    if request_id is not None and reply.get("request_id") != request_id:
        raise SchemaViolation("response does not echo the request id")
    if not reply.get("ok"):
        e = reply.get("error", {})
        err = error_from_code(e.get("code", "INTERNAL_ERROR"), e.get("message", ""))
        err.details = e.get("details", {})
        raise err
    return reply.get("result")


class SignedClient:
    """Sends signed requests over one connection; raises wire errors as exceptions."""

    def __init__(self, identity: Identity, connection: Connection):
        self.identity = identity
        self.connection = connection
        self._next_id = 1
        self._lock = threading.Lock()

    def call(self, op: str, **params):
        with self._lock:
            rid = self._next_id
            self._next_id += 1
            reply = self.connection.request(request_message(self.identity, rid, op, params))
        return raise_for_response(reply, rid)

    def close(self) -> None:
        self.connection.close()
