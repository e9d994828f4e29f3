"""Message transports between the server and its clients.

Both transports move encoded bytes, never live objects, so a run behaves the
same whichever one carries it.  Every frame can be recorded in a
:class:`TrafficLog` for later auditing.
"""
from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Optional

from ..errors import TransportError

log = logging.getLogger(__name__)

_FRAME = struct.Struct("<I")
MAX_FRAME = 1 << 30
_CLOSED = object()


@dataclass
class TrafficLog:
    """Raw frames as (direction, site, bytes); direction is "up" or "down".

    Socket transports record the length-prefixed stream bytes; the in-process
    transport records the bare message bytes.
    """
    framed: bool = False
    frames: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, direction: str, site, data: bytes) -> None:
        with self._lock:
            self.frames.append((direction, site, bytes(data)))


# -- in-process -------------------------------------------------------------

class InProcClientEndpoint:
    def __init__(self, hub: "InProcTransport", index: int):
        self.hub = hub
        self.index = index
        self.inbox: queue.Queue = queue.Queue()

    def send(self, data: bytes) -> None:
        if self.hub.closed:
            raise TransportError("transport closed")
        if self.hub.log:
            self.hub.log.record("up", self.index, data)
        self.hub.uplink.put((self.index, bytes(data)))

    def recv(self, timeout: Optional[float] = None) -> bytes:
        try:
            item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError("timed out waiting for the server") from None
        if item is _CLOSED:
            raise TransportError("server closed the connection")
        return item

    def close(self) -> None:
        self.hub.uplink.put((self.index, _CLOSED))


class InProcTransport:
    """Queue-backed transport for ``n`` clients inside one process."""

    def __init__(self, n_clients: int, log: Optional[TrafficLog] = None):
        self.uplink: queue.Queue = queue.Queue()
        self.clients = [InProcClientEndpoint(self, i) for i in range(n_clients)]
        self.log = log
        self.closed = False

    def client(self, index: int) -> InProcClientEndpoint:
        return self.clients[index]

    def accept(self, timeout: Optional[float] = None) -> None:
        pass

    def send(self, index: int, data: bytes) -> None:
        if self.log:
            self.log.record("down", index, data)
        self.clients[index].inbox.put(bytes(data))

    def recv(self, timeout: Optional[float] = None) -> tuple:
        """Next ``(client_index, bytes)`` from any client; bytes is None on disconnect."""
        try:
            index, item = self.uplink.get(timeout=timeout)
        except queue.Empty:
            raise TransportError("timed out waiting for clients") from None
        return index, (None if item is _CLOSED else item)

    def close(self) -> None:
        self.closed = True
        for c in self.clients:
            c.inbox.put(_CLOSED)


# -- sockets -----------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, data: bytes) -> bytes:
    frame = _FRAME.pack(len(data)) + data
    try:
        sock.sendall(frame)
    except OSError as exc:
        raise TransportError(f"send failed: {exc}") from exc
    return frame


def recv_frame(sock: socket.socket) -> bytes:
    try:
        (n,) = _FRAME.unpack(_recv_exact(sock, _FRAME.size))
        if n > MAX_FRAME:
            raise TransportError(f"frame of {n} bytes exceeds the limit")
        return _recv_exact(sock, n)
    except socket.timeout:
        raise TransportError("timed out waiting for a frame") from None
    except OSError as exc:
        if isinstance(exc, TransportError):
            raise
        raise TransportError(f"receive failed: {exc}") from exc


def split_frames(stream: bytes) -> list:
    """Cut a captured length-prefixed stream back into message blobs."""
    out, pos = [], 0
    while pos < len(stream):
        if pos + _FRAME.size > len(stream):
            raise TransportError("captured stream ends inside a frame header")
        (n,) = _FRAME.unpack_from(stream, pos)
        pos += _FRAME.size
        if pos + n > len(stream):
            raise TransportError("captured stream ends inside a frame")
        out.append(stream[pos:pos + n])
        pos += n
    return out


def parse_address(address: str) -> tuple:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {address!r}")
    return host, int(port)


class SocketClientEndpoint:
    def __init__(self, address: tuple, log: Optional[TrafficLog] = None, index=None,
                 timeout: Optional[float] = None):
        try:
            self.sock = socket.create_connection(address, timeout=10.0)
        except OSError as exc:
            raise TransportError(f"cannot connect to {address}: {exc}") from exc
        self.sock.settimeout(timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.log = log
        self.index = index

    def send(self, data: bytes) -> None:
        frame = send_frame(self.sock, data)
        if self.log:
            self.log.record("up", self.index, frame)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        self.sock.settimeout(timeout)
        return recv_frame(self.sock)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class SocketServer:
    """Listening side: one connection per client, a reader thread per connection."""

    def __init__(self, n_clients: int, host: str = "127.0.0.1", port: int = 0,
                 log: Optional[TrafficLog] = None):
        self.n_clients = n_clients
        self.log = log
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self.listener.bind((host, port))
        except OSError as exc:
            self.listener.close()
            raise TransportError(f"cannot listen on {host}:{port}: {exc}") from exc
        self.listener.listen(n_clients)
        self.address = self.listener.getsockname()
        self.conns: list = []
        self.inbox: queue.Queue = queue.Queue()
        self._send_lock = threading.Lock()

    def accept(self, timeout: Optional[float] = None) -> None:
        self.listener.settimeout(timeout)
        while len(self.conns) < self.n_clients:
            try:
                conn, _ = self.listener.accept()
            except socket.timeout:
                raise TransportError("timed out waiting for clients to connect") from None
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            index = len(self.conns)
            self.conns.append(conn)
            threading.Thread(target=self._reader, args=(index, conn), daemon=True).start()
            log.debug("client connection %d accepted", index)

    def _reader(self, index: int, conn: socket.socket) -> None:
        while True:
            try:
                data = recv_frame(conn)
            except TransportError:
                self.inbox.put((index, _CLOSED))
                return
            self.inbox.put((index, data))

    def send(self, index: int, data: bytes) -> None:
        with self._send_lock:
            frame = send_frame(self.conns[index], data)
        if self.log:
            self.log.record("down", index, frame)

    def recv(self, timeout: Optional[float] = None) -> tuple:
        try:
            index, item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError("timed out waiting for clients") from None
        return index, (None if item is _CLOSED else item)

    def close(self) -> None:
        for c in self.conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()
        self.listener.close()
