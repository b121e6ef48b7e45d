"""Channels between the coordinator and its clients.

Both transports move encoded payloads, so the coordinator and the clients
see exactly the same bytes whichever one is used. ``InProcess`` hands
payloads over thread-safe queues; ``SocketLoopback`` sends length-prefixed
frames over TCP on the loopback interface. Clients always run in their own
threads and share no mutable state with the coordinator.
"""

from __future__ import annotations

import enum
import queue
import socket
import threading
from dataclasses import dataclass

from .messages import (
    PROTOCOL_VERSION,
    HandshakeError,
    Hello,
    Message,
    ProtocolError,
    Welcome,
    decode,
    encode,
    frame,
    frame_length,
)

DEFAULT_TIMEOUT = 60.0


class TransportKind(str, enum.Enum):
    IN_PROCESS = "inprocess"
    SOCKET = "socket"


class ChannelTimeout(TimeoutError):
    pass


class ChannelClosed(ConnectionError):
    pass


class Channel:
    """One ordered, reliable, bidirectional message pipe."""

    def __init__(self, p: int | None = None, K: int | None = None):
        self.p = p
        self.K = K

    def send(self, msg: Message) -> None:
        self.send_bytes(encode(msg, self.p, self.K))

    def recv(self, timeout: float | None = None) -> Message:
        return decode(self.recv_bytes(timeout))

    def send_bytes(self, payload: bytes) -> None:
        raise NotImplementedError

    def recv_bytes(self, timeout: float | None = None) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class QueueChannel(Channel):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, **dims):
        super().__init__(**dims)
        self.inbox = inbox
        self.outbox = outbox

    def send_bytes(self, payload: bytes) -> None:
        self.outbox.put(bytes(payload))

    def recv_bytes(self, timeout: float | None = None) -> bytes:
        try:
            item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise ChannelTimeout(f"no message within {timeout} s") from None
        if item is None:
            raise ChannelClosed("peer closed the channel")
        return item

    def close(self) -> None:
        self.outbox.put(None)


def queue_pair(**dims) -> tuple[QueueChannel, QueueChannel]:
    a, b = queue.Queue(), queue.Queue()
    return QueueChannel(a, b, **dims), QueueChannel(b, a, **dims)


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket, **dims):
        super().__init__(**dims)
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()

    def send_bytes(self, payload: bytes) -> None:
        with self._send_lock:
            self.sock.sendall(frame(payload))

    def _read(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(min(n - got, 1 << 20))
            if not chunk:
                raise ChannelClosed("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv_bytes(self, timeout: float | None = None) -> bytes:
        self.sock.settimeout(timeout)
        try:
            n = frame_length(self._read(4))
            return self._read(n)
        except socket.timeout:
            raise ChannelTimeout(f"no message within {timeout} s") from None

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class Transport:
    """Connects client objects to the coordinator.

    ``port=0`` lets the OS pick a free loopback port (socket kind only).
    """

    kind: TransportKind = TransportKind.IN_PROCESS
    host: str = "127.0.0.1"
    port: int = 0
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        self.kind = TransportKind(self.kind)

    def connect(self, clients) -> tuple[list[Channel], list[threading.Thread]]:
        """Start one thread per client; return coordinator-side channels
        ordered by source id, after the version handshake."""
        if self.kind is TransportKind.IN_PROCESS:
            pairs = [queue_pair() for _ in clients]
            server_side = [s for s, _ in pairs]
            threads = [
                _spawn(client, c) for client, (_, c) in zip(clients, pairs)
            ]
        else:
            listener = socket.create_server((self.host, self.port))
            listener.settimeout(self.timeout)
            port = listener.getsockname()[1]
            threads = [_spawn_socket(client, self.host, port, self.timeout) for client in clients]
            server_side = []
            try:
                for _ in clients:
                    conn, _ = listener.accept()
                    server_side.append(SocketChannel(conn))
            except socket.timeout:
                raise ChannelTimeout("not every client connected in time") from None
            finally:
                listener.close()
        return _handshake(server_side, self.timeout), threads


def _spawn(client, channel: Channel) -> threading.Thread:
    t = threading.Thread(target=client.serve, args=(channel,), daemon=True)
    t.start()
    return t


def _spawn_socket(client, host: str, port: int, timeout: float) -> threading.Thread:
    def target():
        sock = socket.create_connection((host, port), timeout=timeout)
        client.serve(SocketChannel(sock))

    t = threading.Thread(target=target, daemon=True)
    t.start()
    return t


def _handshake(channels: list[Channel], timeout: float) -> list[Channel]:
    by_source: dict[int, Channel] = {}
    p = None
    for ch in channels:
        try:
            msg = ch.recv(timeout)
        except HandshakeError:
            raise
        except ChannelTimeout:
            raise ChannelTimeout("a client did not introduce itself in time") from None
        if not isinstance(msg, Hello):
            raise HandshakeError(f"expected Hello, got {type(msg).__name__}")
        if msg.protocol_version != PROTOCOL_VERSION:
            raise HandshakeError(
                f"source {msg.source_id} speaks protocol {msg.protocol_version}, "
                f"coordinator speaks {PROTOCOL_VERSION}"
            )
        if msg.source_id in by_source:
            raise HandshakeError(f"two clients claim source {msg.source_id}")
        if p is None:
            p = msg.p
        elif msg.p != p:
            raise HandshakeError(f"source {msg.source_id} has p={msg.p}, others p={p}")
        by_source[msg.source_id] = ch
    ordered = [by_source[k] for k in sorted(by_source)]
    K = len(ordered)
    if sorted(by_source) != list(range(K)):
        raise HandshakeError(f"source ids must be 0..{K - 1}, got {sorted(by_source)}")
    for ch in ordered:
        # arrays may cover a subset of sources, so only p is pinned
        ch.p = p
        ch.send(Welcome(PROTOCOL_VERSION, K))
    return ordered


__all__ = [
    "Channel",
    "ChannelClosed",
    "ChannelTimeout",
    "ProtocolError",
    "QueueChannel",
    "SocketChannel",
    "Transport",
    "TransportKind",
    "queue_pair",
]
