"""Client-side request/response channels with byte and round-trip counters."""

from __future__ import annotations

import socket
from typing import Optional

from ..config import Settings
from . import codec
from .codec import Message
from .server import Session, read_frame


class TransportError(RuntimeError):
    pass


class Channel:
    """One in-flight request at a time; subclasses implement ``_exchange``."""

    def __init__(self):
        self.round_trips = 0
        self.bytes_sent = 0
        self.bytes_received = 0
        self.sent_sizes: list[int] = []
        self.received_sizes: list[int] = []

    @property
    def bytes_transferred(self) -> int:
        return self.bytes_sent + self.bytes_received

    def _exchange(self, data: bytes) -> bytes:
        raise NotImplementedError

    def request(self, message: Message) -> tuple[Message, int, int]:
        """Send ``message`` and wait for the reply; returns (reply, bytes out, bytes in)."""
        data = codec.encode(message)
        reply = self._exchange(data)
        self.round_trips += 1
        self.bytes_sent += len(data)
        self.bytes_received += len(reply)
        self.sent_sizes.append(len(data))
        self.received_sizes.append(len(reply))
        return codec.decode(reply), len(data), len(reply)

    def close(self) -> None:
        pass


class LoopbackChannel(Channel):
    """In-process channel: full encode/decode, no sockets, no delay."""

    def __init__(self, settings: Settings, trace: Optional[list] = None):
        super().__init__()
        self.session = Session(settings, trace)
        self.closed = False

    def _exchange(self, data: bytes) -> bytes:
        if self.closed:
            raise TransportError("loopback session was closed by the server")
        reply, close = self.session.handle_bytes(data)
        self.closed = close
        return reply


class SocketChannel(Channel):
    def __init__(self, host: str, port: int, timeout_s: float = 2.0):
        super().__init__()
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout_s)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _exchange(self, data: bytes) -> bytes:
        try:
            self.sock.sendall(data)
            return read_frame(self.sock)
        except socket.timeout as exc:
            raise TransportError("timed out waiting for the server") from exc
        except (OSError, ConnectionError) as exc:
            raise TransportError(str(exc)) from exc

    def close(self) -> None:
        self.sock.close()


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)
