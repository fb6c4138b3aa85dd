"""Socket-backed endpoints: UDP datagrams or raw Ethernet frames for the
data/control layers, TCP length-prefixed streams for management traffic."""

from __future__ import annotations

import ctypes
import errno
import logging
import select
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from ..domain import MessageLayer
from .errors import BindFailure, EndpointClosed, LinkLayerUnavailable, UnknownPeer
from .wire import HEADER_LEN, DecodeError, WireMessage, decode, encode, frame_stream

log = logging.getLogger(__name__)

ETHERTYPE = 0x88B5
PACKET_OUTGOING = 4
_LEN = struct.Struct(">I")


@dataclass(frozen=True)
class PeerAddress:
    host: str
    port: int
    site: str = ""


@dataclass
class EndpointConfig:
    peers: Dict[int, PeerAddress] = field(default_factory=dict)
    interface: str = "lo"
    control_priority: int = 6
    network: object = None  # InProcessNetwork for ChannelKind.IN_PROCESS


def node_mac(node: int) -> bytes:
    """Locally administered unicast MAC carrying the NodeId."""
    return b"\x02\x00" + struct.pack(">I", node)


class _SocketEndpoint:
    kind = "socket"

    def __init__(self, local: int, config: EndpointConfig) -> None:
        if local not in config.peers:
            raise UnknownPeer(local)
        self.local = local
        self.config = config
        self.closed = False
        #: monotonic arrival time of the message last returned by receive()
        self.last_rx_ns = 0
        self._me = config.peers[local]
        # plain select(): it keeps microsecond timeouts, where epoll rounds up
        # to whole ms, and skips the selectors wrapper on the hot path
        self._readers: Dict[int, Tuple[socket.socket, str, object]] = {}
        self._fds: list = []
        self._pending: deque = deque()
        self._send_lock = threading.Lock()
        self._streams: Dict[int, socket.socket] = {}
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((self._me.host, self._me.port))
        except OSError as exc:
            self._listener.close()
            raise BindFailure(f"tcp bind {self._me.host}:{self._me.port}: {exc}") from exc
        self._listener.listen(16)
        self._listener.setblocking(False)
        self._watch(self._listener, "listen")

    def _watch(self, sock: socket.socket, tag: str, state: object = None) -> None:
        self._readers[sock.fileno()] = (sock, tag, state)
        self._fds = list(self._readers)

    def _unwatch(self, sock: socket.socket) -> None:
        self._readers.pop(sock.fileno(), None)
        self._fds = list(self._readers)

    def _peer(self, dest: int) -> PeerAddress:
        try:
            return self.config.peers[dest]
        except KeyError:
            raise UnknownPeer(dest) from None

    # -- sending -------------------------------------------------------
    def send(self, dest: int, msg: WireMessage) -> None:
        if self.closed:
            raise EndpointClosed(self.local)
        data = encode(msg)
        if msg.layer == MessageLayer.MANAGEMENT:
            self._send_stream(dest, data)
        else:
            self._send_datagram(dest, data, msg.layer == MessageLayer.CONTROL)

    def _send_stream(self, dest: int, data: bytes) -> None:
        addr = self._peer(dest)
        framed = frame_stream(data)
        with self._send_lock:
            for attempt in (0, 1):
                s = self._streams.get(dest)
                if s is None:
                    s = socket.create_connection((addr.host, addr.port), timeout=2.0)
                    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    self._streams[dest] = s
                try:
                    s.sendall(framed)
                    return
                except OSError:
                    s.close()
                    del self._streams[dest]
                    if attempt:
                        raise

    def _send_datagram(self, dest: int, data: bytes, control: bool) -> None:
        raise NotImplementedError

    # -- receiving -----------------------------------------------------
    def receive(self, timeout_ns: Optional[int] = None) -> Tuple[WireMessage, int]:
        if self.closed:
            raise EndpointClosed(self.local)
        deadline = None if timeout_ns is None else time.monotonic_ns() + timeout_ns
        polled = False
        while True:
            if self._pending:
                msg, self.last_rx_ns = self._pending.popleft()
                return msg, msg.src
            if deadline is None:
                wait = None
            else:
                left = deadline - time.monotonic_ns()
                if left <= 0:
                    if polled:
                        raise TimeoutError(f"node {self.local}: receive timed out")
                    left = 0  # a zero timeout still polls once
                wait = left / 1e9
            polled = True
            try:
                ready, _, _ = select.select(self._fds, (), (), wait)
            except InterruptedError:
                continue
            except (ValueError, OSError):
                if self.closed:
                    raise EndpointClosed(self.local) from None
                raise
            for fd in ready:
                sock, tag, state = self._readers[fd]
                if tag == "dgram":
                    self._read_datagram()
                elif tag == "listen":
                    self._accept()
                else:
                    self._read_stream(sock, state)
            if self.closed:
                raise EndpointClosed(self.local)

    def _read_datagram(self) -> None:
        raise NotImplementedError

    def _push_bytes(self, data: bytes, rx_ns: Optional[int] = None) -> None:
        try:
            self._pending.append((decode(data), time.monotonic_ns() if rx_ns is None else rx_ns))
        except DecodeError as exc:
            log.warning("node %d: dropping undecodable message: %s", self.local, exc)

    def _accept(self) -> None:
        try:
            conn, _ = self._listener.accept()
        except BlockingIOError:
            return
        conn.setblocking(False)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._watch(conn, "conn", bytearray())

    def _read_stream(self, conn: socket.socket, buf: bytearray) -> None:
        try:
            chunk = conn.recv(65536)
        except BlockingIOError:
            return
        except OSError:
            chunk = b""
        if not chunk:
            self._unwatch(conn)
            conn.close()
            return
        buf.extend(chunk)
        while len(buf) >= 4:
            (n,) = _LEN.unpack_from(buf)
            if len(buf) < 4 + n:
                break
            self._push_bytes(bytes(buf[4 : 4 + n]))
            del buf[: 4 + n]

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for sock, _, _ in list(self._readers.values()):
            try:
                sock.close()
            except OSError:
                pass
        self._readers.clear()
        self._fds = []
        with self._send_lock:
            for s in self._streams.values():
                s.close()
            self._streams.clear()


class DatagramEndpoint(_SocketEndpoint):
    """UDP unicast, one message per datagram."""

    kind = "udp"

    def __init__(self, local: int, config: EndpointConfig) -> None:
        super().__init__(local, config)
        self._udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self._udp.bind((self._me.host, self._me.port))
        except OSError as exc:
            self.close()
            raise BindFailure(f"udp bind {self._me.host}:{self._me.port}: {exc}") from exc
        self._udp.setblocking(False)
        self._stamped = _enable_timestamps(self._udp)
        self._watch(self._udp, "dgram")
        self._ctl = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        _set_priority(self._ctl, config.control_priority)

    def _send_datagram(self, dest: int, data: bytes, control: bool) -> None:
        addr = self._peer(dest)
        sock = self._ctl if control else self._udp
        try:
            sock.sendto(data, (addr.host, addr.port))
        except OSError as exc:
            # best effort; an unreachable peer looks like a lost datagram
            if exc.errno not in (errno.ECONNREFUSED, errno.EHOSTUNREACH, errno.ENETUNREACH):
                raise

    def _read_datagram(self) -> None:
        while True:
            try:
                if self._stamped:
                    data, anc, _, _ = self._udp.recvmsg(65535, _CMSG_SPACE)
                else:
                    data, anc = self._udp.recv(65535), []
            except (BlockingIOError, InterruptedError):
                return
            except ConnectionRefusedError:
                continue
            self._push_bytes(data, _kernel_rx_time(anc))

    def close(self) -> None:
        super().close()
        ctl = getattr(self, "_ctl", None)
        if ctl is not None:
            ctl.close()


class RawFrameEndpoint(_SocketEndpoint):
    """Ethernet frames with EtherType 0x88B5; the NodeId is the MAC suffix."""

    kind = "l2"

    def __init__(self, local: int, config: EndpointConfig) -> None:
        self._mac = node_mac(local)
        try:
            raw = socket.socket(socket.AF_PACKET, socket.SOCK_RAW, socket.htons(ETHERTYPE))
            # every bound socket on the segment sees every frame; let the
            # kernel drop the ones addressed to other nodes
            _attach_mac_filter(raw, self._mac)
            raw.bind((config.interface, ETHERTYPE))
        except (PermissionError, AttributeError, OSError) as exc:
            raise LinkLayerUnavailable(f"raw frames unavailable on {config.interface}: {exc}") from exc
        super().__init__(local, config)
        self._raw = raw
        self._raw.setblocking(False)
        self._stamped = _enable_timestamps(self._raw)
        self._watch(self._raw, "dgram")
        # protocol 0: send only, so it never queues a copy of inbound frames
        self._ctl = socket.socket(socket.AF_PACKET, socket.SOCK_RAW, 0)
        self._ctl.bind((config.interface, 0))
        _set_priority(self._ctl, config.control_priority)
        self._ethertype = struct.pack(">H", ETHERTYPE)

    def _send_datagram(self, dest: int, data: bytes, control: bool) -> None:
        self._peer(dest)
        frame = node_mac(dest) + self._mac + self._ethertype + data
        (self._ctl if control else self._raw).send(frame)

    def _read_datagram(self) -> None:
        while True:
            try:
                if self._stamped:
                    data, anc, _, addr = self._raw.recvmsg(65535, _CMSG_SPACE)
                else:
                    (data, addr), anc = self._raw.recvfrom(65535), []
            except (BlockingIOError, InterruptedError):
                return
            if addr[2] == PACKET_OUTGOING or data[:6] != self._mac:
                continue
            body = data[14:]
            if len(body) >= HEADER_LEN:
                # drop link-layer padding
                plen = struct.unpack_from(">H", body, HEADER_LEN - 2)[0]
                body = body[: HEADER_LEN + plen]
            self._push_bytes(body, _kernel_rx_time(anc))

    def close(self) -> None:
        super().close()
        ctl = getattr(self, "_ctl", None)
        if ctl is not None:
            ctl.close()


_SO_TIMESTAMPNS = getattr(socket, "SO_TIMESTAMPNS", None)
_TIMESPEC = struct.Struct("@qq")
_CMSG_SPACE = socket.CMSG_SPACE(_TIMESPEC.size) if hasattr(socket, "CMSG_SPACE") else 0


def _enable_timestamps(sock: socket.socket) -> bool:
    """Ask the kernel to stamp arrivals, so a descheduled reader still
    measures when a datagram actually came in."""
    if _SO_TIMESTAMPNS is None or not _CMSG_SPACE:
        return False
    try:
        sock.setsockopt(socket.SOL_SOCKET, _SO_TIMESTAMPNS, 1)
        return True
    except OSError:
        return False


def _kernel_rx_time(ancillary) -> Optional[int]:
    for level, kind, data in ancillary:
        if level == socket.SOL_SOCKET and kind == _SO_TIMESTAMPNS and len(data) >= _TIMESPEC.size:
            sec, nsec = _TIMESPEC.unpack_from(data)
            # the stamp is wall-clock time; move it onto the monotonic clock
            return sec * 1_000_000_000 + nsec - (time.time_ns() - time.monotonic_ns())
    return None


_SO_ATTACH_FILTER = getattr(socket, "SO_ATTACH_FILTER", 26)


def _attach_mac_filter(sock: socket.socket, mac: bytes) -> None:
    """Classic BPF program accepting only frames whose destination is mac."""
    hi, lo = struct.unpack(">IH", mac)
    prog = [
        (0x20, 0, 0, 0),  # ld [0]
        (0x15, 0, 3, hi),  # jeq #hi, next, drop
        (0x28, 0, 0, 4),  # ldh [4]
        (0x15, 0, 1, lo),  # jeq #lo, next, drop
        (0x06, 0, 0, 0xFFFF),  # ret #65535
        (0x06, 0, 0, 0),  # drop
    ]
    code = ctypes.create_string_buffer(b"".join(struct.pack("HBBI", *ins) for ins in prog))
    fprog = struct.pack("HL", len(prog), ctypes.addressof(code))
    sock.setsockopt(socket.SOL_SOCKET, _SO_ATTACH_FILTER, fprog)


def _set_priority(sock: socket.socket, prio: int) -> None:
    so_priority = getattr(socket, "SO_PRIORITY", None)
    if so_priority is None:
        return
    try:
        sock.setsockopt(socket.SOL_SOCKET, so_priority, prio)
    except OSError:
        pass


def raw_frames_available(interface: str = "lo") -> bool:
    try:
        s = socket.socket(socket.AF_PACKET, socket.SOCK_RAW, socket.htons(ETHERTYPE))
        s.bind((interface, ETHERTYPE))
        s.close()
        return True
    except (PermissionError, AttributeError, OSError):
        return False
