"""Remote executor: per-connection sessions behind a threaded TCP server."""

from __future__ import annotations

import itertools
import logging
import socket
import socketserver
import threading
from typing import Optional

from ..config import Settings, config_hash, geometry_hash
from . import codec
from .codec import ErrorCode, Message, MessageType, ProtocolError, TaskKind

log = logging.getLogger(__name__)

_executor_ids = itertools.count(1)


class Session:
    """State of one client connection. Requests are answered strictly in order."""

    def __init__(self, settings: Settings, trace: Optional[list] = None):
        self.settings = settings
        self.trace = trace
        self.executor_id: Optional[int] = None
        self._geometry_hash = geometry_hash(settings)
        self._config_hash = config_hash(settings)

    @property
    def registered(self) -> bool:
        return self.executor_id is not None

    def _error(self, code: ErrorCode, reason: str) -> Message:
        return Message(MessageType.ERROR, codec.encode_error(code, reason))

    def _register(self, payload: bytes) -> Message:
        reg = codec.decode_register(payload)
        if reg.version != codec.PROTOCOL_VERSION:
            return self._error(ErrorCode.VERSION_MISMATCH,
                               f"protocol version {reg.version} unsupported, server speaks {codec.PROTOCOL_VERSION}")
        if reg.geometry_hash != self._geometry_hash:
            return self._error(ErrorCode.GEOMETRY_MISMATCH, "hand geometry or camera differs from the server's")
        if reg.config_hash != self._config_hash:
            return self._error(ErrorCode.CONFIG_MISMATCH, "objective or optimizer configuration differs from the server's")
        unsupported = [k for k in reg.kinds if k not in (TaskKind.FUSED_FRAME, TaskKind.PHASE)]
        if unsupported:
            return self._error(ErrorCode.PROTOCOL, f"unsupported task kinds {unsupported}")
        self.executor_id = next(_executor_ids)
        return Message(MessageType.REGISTER_ACK, codec.encode_ack(self.executor_id))

    def handle(self, message: Message) -> tuple[Message, bool]:
        """Reply to ``message``; the flag asks the caller to close the connection."""
        from ..worker import execute_step

        if message.type == MessageType.PING:
            return Message(MessageType.PONG, message.payload), False
        if message.type == MessageType.REGISTER:
            try:
                reply = self._register(message.payload)
            except ProtocolError as exc:
                return self._error(ErrorCode.PROTOCOL, str(exc)), True
            return reply, reply.type == MessageType.ERROR
        if message.type == MessageType.STEP_REQUEST:
            if not self.registered:
                return self._error(ErrorCode.NOT_REGISTERED, "register before sending step requests"), True
            try:
                req = codec.decode_step_request(message.payload)
            except ProtocolError as exc:
                return self._error(ErrorCode.PROTOCOL, str(exc)), True
            try:
                result = execute_step(req, self.settings, self.trace)
            except Exception as exc:  # reported to the client, which falls back locally
                log.exception("step execution failed")
                return self._error(ErrorCode.EXECUTION, f"{type(exc).__name__}: {exc}"), False
            return Message(MessageType.STEP_RESULT, codec.encode_step_result(result)), False
        return self._error(ErrorCode.PROTOCOL, f"unexpected {message.type.name}"), True

    def handle_bytes(self, data: bytes) -> tuple[bytes, bool]:
        try:
            message = codec.decode(data)
        except ProtocolError as exc:
            return codec.encode(self._error(ErrorCode.PROTOCOL, str(exc))), True
        reply, close = self.handle(message)
        return codec.encode(reply), close


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionError(f"connection closed with {remaining} of {n} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    header = recv_exact(sock, codec.HEADER_SIZE)
    length, _ = codec.parse_header(header)
    return header + recv_exact(sock, length)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        session = Session(self.server.settings)
        self.server.sessions.add(session)
        sock = self.request
        try:
            while True:
                try:
                    frame = read_frame(sock)
                except ProtocolError as exc:
                    sock.sendall(codec.encode(Message(MessageType.ERROR, codec.encode_error(ErrorCode.PROTOCOL, str(exc)))))
                    return
                except (ConnectionError, OSError):
                    return
                reply, close = session.handle_bytes(frame)
                sock.sendall(reply)
                if close:
                    return
        finally:
            self.server.sessions.discard(session)


class StepServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, settings: Settings):
        self.settings = settings
        self.sessions: set = set()
        super().__init__(address, _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]


def start_server(address, settings: Settings) -> tuple[StepServer, threading.Thread]:
    """Serve in a background thread; call ``server.shutdown()`` to stop."""
    server = StepServer(address, settings)
    thread = threading.Thread(target=server.serve_forever, name="edgehand-server", daemon=True)
    thread.start()
    return server, thread


def serve(address, settings: Settings) -> None:
    """Serve until interrupted."""
    with StepServer(address, settings) as server:
        log.info("serving on %s:%d", *server.address)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            log.info("shutting down")
