"""Asynchronous message channels and the named-channel connection manager.

All inter-node traffic uses one wire discipline: a 4-byte big-endian
unsigned length prefix followed by the payload bytes. Named channels are
point-to-point TCP links that third parties may connect, disconnect and
reconnect while the owning bundle blocks on read/write; reads and writes
on an unwired name simply wait for wiring to complete.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass

from .errors import (
    ConnectFailed,
    FrameTooLarge,
    NameAlreadyBound,
    NameNotBound,
    PeerClosed,
    SchemaViolation,
)

DEFAULT_MAX_FRAME = 16 * 1024 * 1024
DEFAULT_CONNECT_TIMEOUT = 5.0

# --- framing ------------------------------------------------------------

def send_frame(sock: socket.socket, payload: bytes,
               max_frame: int = DEFAULT_MAX_FRAME) -> None:
    if len(payload) > max_frame:
        raise FrameTooLarge(f"{len(payload)} > {max_frame}")
    sock.sendall(struct.pack("!I", len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock: socket.socket,
               max_frame: int = DEFAULT_MAX_FRAME) -> bytes | None:
    """Next frame, or None on clean EOF."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack("!I", header)
    if length > max_frame:
        raise FrameTooLarge(f"{length} > {max_frame}")
    if length == 0:
        return b""
    return _recv_exact(sock, length)


# --- connectors ----------------------------------------------------------

@dataclass(frozen=True)
class Connector:
    """Location of a running machine: host plus its two service ports."""

    host: str
    machine_port: int
    resource_port: int

    def __post_init__(self):
        for port in (self.machine_port, self.resource_port):
            if not 0 < port < 65536:
                raise SchemaViolation(f"port out of range: {port}")

    def __str__(self) -> str:
        return f"{self.host}:{self.machine_port}:{self.resource_port}"

    @classmethod
    def parse(cls, text: str) -> "Connector":
        host, mport, rport = text.rsplit(":", 2)
        return cls(host, int(mport), int(rport))

    def attrib(self) -> dict[str, str]:
        return {"host": self.host, "machinePort": str(self.machine_port),
                "resourcePort": str(self.resource_port)}

    @classmethod
    def from_element(cls, el) -> "Connector":
        if el.tag != "CONNECTOR":
            raise SchemaViolation(f"expected CONNECTOR, got {el.tag}")
        return cls(el.get("host", ""), int(el.get("machinePort", "0")),
                   int(el.get("resourcePort", "0")))


# --- in-process channel pairs (default channels) -------------------------

class ChannelEndpoint:
    """One end of a FIFO byte-message channel."""

    def __init__(self, max_frame: int = DEFAULT_MAX_FRAME):
        self._inbox: queue.Queue = queue.Queue()
        self._peer: "ChannelEndpoint | None" = None
        self._closed = threading.Event()
        self._max_frame = max_frame

    def write(self, payload: bytes) -> None:
        if len(payload) > self._max_frame:
            raise FrameTooLarge(f"{len(payload)} > {self._max_frame}")
        peer = self._peer
        if peer is None or peer._closed.is_set():
            raise PeerClosed("peer endpoint closed")
        peer._inbox.put(payload)

    def read(self) -> bytes:
        """Next message in FIFO order; blocks while the channel is open."""
        while True:
            try:
                return self._inbox.get(timeout=0.1)
            except queue.Empty:
                if self._closed.is_set() or (
                        self._peer is not None and self._peer._closed.is_set()):
                    # queue already drained: the Empty above checked it
                    raise PeerClosed("channel closed") from None

    def try_read(self, timeout: float) -> bytes | None:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._closed.set()


def channel_pair(max_frame: int = DEFAULT_MAX_FRAME) -> tuple[ChannelEndpoint, ChannelEndpoint]:
    a, b = ChannelEndpoint(max_frame), ChannelEndpoint(max_frame)
    a._peer, b._peer = b, a
    return a, b


# --- named channels -------------------------------------------------------

UNBOUND = "UNBOUND"
LISTENING = "LISTENING"
CONNECTED = "CONNECTED"


class _NamedChannel:
    def __init__(self, name: str, max_frame: int):
        self.name = name
        self.state = UNBOUND
        self.port: int | None = None
        self.sock: socket.socket | None = None
        self.listener: socket.socket | None = None
        self.inbox: queue.Queue = queue.Queue()
        self.connected = threading.Event()
        self.send_lock = threading.Lock()
        self.max_frame = max_frame


class NamedChannelEndpoint:
    """Bundle-facing read/write handle for one named channel."""

    def __init__(self, manager: "ConnectionManager", name: str):
        self._manager = manager
        self._name = name

    def write(self, payload: bytes) -> None:
        self._manager.write(self._name, payload)

    def read(self) -> bytes:
        return self._manager.read(self._name)


class ConnectionManager:
    """Per-machine table of named channels and the wiring operations.

    Thread-safe: control requests arriving on the machine channel mutate
    the table while the bundle blocks on read/write. ``control_log``
    records every (request, response) document pair for inspection.
    """

    def __init__(self, host: str = "127.0.0.1",
                 max_frame: int = DEFAULT_MAX_FRAME,
                 connect_timeout: float = DEFAULT_CONNECT_TIMEOUT):
        self.host = host
        self._channels: dict[str, _NamedChannel] = {}
        self._lock = threading.RLock()
        self._max_frame = max_frame
        self._connect_timeout = connect_timeout
        self._shutdown = False
        self.control_log: list[tuple[str, str]] = []

    def _channel(self, name: str) -> _NamedChannel:
        if not name:
            raise SchemaViolation("channel names must be non-empty")
        with self._lock:
            ch = self._channels.get(name)
            if ch is None:
                ch = _NamedChannel(name, self._max_frame)
                self._channels[name] = ch
            return ch

    def endpoint(self, name: str) -> NamedChannelEndpoint:
        self._channel(name)
        return NamedChannelEndpoint(self, name)

    def states(self) -> dict[str, str]:
        with self._lock:
            return {name: ch.state for name, ch in self._channels.items()}

    def state(self, name: str) -> str:
        with self._lock:
            ch = self._channels.get(name)
            return ch.state if ch is not None else UNBOUND

    # --- wiring operations ----------------------------------------------

    def create(self, name: str) -> int:
        """Listen for one inbound connection for ``name``; returns the port."""
        ch = self._channel(name)
        with self._lock:
            if ch.state != UNBOUND:
                raise NameAlreadyBound(f"{name} is {ch.state}")
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.bind((self.host, 0))
            listener.listen(1)
            ch.listener = listener
            ch.port = listener.getsockname()[1]
            ch.state = LISTENING
        threading.Thread(target=self._accept_one, args=(ch, listener),
                         daemon=True).start()
        return ch.port

    def _accept_one(self, ch: _NamedChannel, listener: socket.socket) -> None:
        try:
            sock, _ = listener.accept()
        except OSError:
            return  # listener closed by disconnect/shutdown
        with self._lock:
            if ch.listener is not listener:
                sock.close()
                return
            listener.close()
            ch.listener = None
            self._attach(ch, sock)

    def connect(self, name: str, host: str, port: int) -> None:
        """Actively connect ``name`` to a peer's waiting listener."""
        ch = self._channel(name)
        with self._lock:
            if ch.state != UNBOUND:
                raise NameAlreadyBound(f"{name} is {ch.state}")
        try:
            sock = socket.create_connection((host, port),
                                            timeout=self._connect_timeout)
            sock.settimeout(None)
        except OSError as exc:
            raise ConnectFailed(f"{host}:{port}: {exc}") from exc
        with self._lock:
            if ch.state != UNBOUND:
                sock.close()
                raise NameAlreadyBound(f"{name} is {ch.state}")
            self._attach(ch, sock)

    def _attach(self, ch: _NamedChannel, sock: socket.socket) -> None:
        # caller holds self._lock
        ch.sock = sock
        ch.state = CONNECTED
        ch.connected.set()
        threading.Thread(target=self._pump_in, args=(ch, sock),
                         daemon=True).start()

    def attach_inbound(self, name: str, sock: socket.socket) -> bool:
        """Attach a pre-accepted socket to a LISTENING name (resource port
        path); returns False if the name is not awaiting a connection."""
        with self._lock:
            ch = self._channels.get(name)
            if ch is None or ch.state != LISTENING:
                return False
            listener, ch.listener = ch.listener, None
            if listener is not None:
                listener.close()
            self._attach(ch, sock)
            return True

    def _pump_in(self, ch: _NamedChannel, sock: socket.socket) -> None:
        while True:
            try:
                frame = recv_frame(sock, ch.max_frame)
            except (OSError, FrameTooLarge):
                frame = None
            if frame is None:
                break
            ch.inbox.put(frame)
        # peer went away: drop to UNBOUND unless a rewire already replaced us
        with self._lock:
            if ch.sock is sock:
                ch.sock = None
                ch.connected.clear()
                if ch.state == CONNECTED:
                    ch.state = UNBOUND
        try:
            sock.close()
        except OSError:
            pass

    def disconnect(self, name: str) -> None:
        with self._lock:
            ch = self._channels.get(name)
            if ch is None or ch.state == UNBOUND:
                raise NameNotBound(name)
            ch.state = UNBOUND
            ch.connected.clear()
            sock, ch.sock = ch.sock, None
            listener, ch.listener = ch.listener, None
        for s in (sock, listener):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass

    def shutdown(self) -> None:
        with self._lock:
            self._shutdown = True
            names = [n for n, ch in self._channels.items()
                     if ch.state != UNBOUND]
        for name in names:
            try:
                self.disconnect(name)
            except NameNotBound:
                pass

    # --- bundle-side read/write ------------------------------------------

    def write(self, name: str, payload: bytes) -> None:
        """Blocks until the name is wired, then sends; survives rewiring."""
        if len(payload) > self._max_frame:
            raise FrameTooLarge(f"{len(payload)} > {self._max_frame}")
        ch = self._channel(name)
        while True:
            ch.connected.wait(timeout=0.2)
            with ch.send_lock:
                with self._lock:
                    sock = ch.sock if ch.state == CONNECTED else None
                if sock is None:
                    if self._shutdown:
                        raise PeerClosed("connection manager shut down")
                    continue
                try:
                    send_frame(sock, payload, ch.max_frame)
                    return
                except OSError:
                    continue  # dropped mid-send; wait for rewiring

    def read(self, name: str) -> bytes:
        """Blocks until a message arrives; disconnection keeps it waiting."""
        ch = self._channel(name)
        while True:
            try:
                return ch.inbox.get(timeout=0.2)
            except queue.Empty:
                if self._shutdown:
                    raise PeerClosed("connection manager shut down") from None

    def try_read(self, name: str, timeout: float) -> bytes | None:
        ch = self._channel(name)
        try:
            return ch.inbox.get(timeout=timeout)
        except queue.Empty:
            return None
