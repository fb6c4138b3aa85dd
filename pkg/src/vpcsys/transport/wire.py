"""Fixed 26-byte big-endian header shared by every layer and channel."""

from __future__ import annotations

import struct
from dataclasses import dataclass

from ..domain import MessageLayer, MsgType, VpcError

HEADER = struct.Struct(">BBBBIIIQH")
HEADER_LEN = HEADER.size  # 26
MAX_PAYLOAD = 1400
VERSION = 1
REGISTERED_TYPES = frozenset(int(t) for t in MsgType)


class EncodeError(VpcError, ValueError):
    pass


class DecodeError(VpcError, ValueError):
    pass


class ShortHeader(DecodeError):
    def __init__(self, n: int) -> None:
        super().__init__(f"short header: {n} bytes")


class UnsupportedVersion(DecodeError):
    def __init__(self, v: int) -> None:
        super().__init__(f"unsupported version {v}")


class BadLayer(DecodeError):
    def __init__(self, layer: int) -> None:
        super().__init__(f"bad layer {layer}")


class LengthMismatch(DecodeError):
    def __init__(self, declared: int, actual: int) -> None:
        super().__init__(f"length mismatch: header says {declared}, got {actual}")


class UnknownMsgType(DecodeError):
    def __init__(self, t: int) -> None:
        super().__init__(f"unregistered msg_type {t}")


@dataclass(frozen=True)
class WireMessage:
    layer: int
    msg_type: int
    src: int
    cluster_id: int = 0
    seq: int = 0
    timestamp_ns: int = 0
    payload: bytes = b""
    flags: int = 0
    version: int = VERSION

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def describe(self) -> str:
        try:
            name = MsgType(self.msg_type).name
        except ValueError:
            name = str(self.msg_type)
        return f"{name}(src={self.src} cluster={self.cluster_id} seq={self.seq})"


def encode(msg: WireMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise EncodeError(f"payload too long: {len(msg.payload)} > {MAX_PAYLOAD}")
    if msg.version != VERSION:
        raise EncodeError(f"unsupported version {msg.version}")
    if msg.layer not in (0, 1, 2):
        raise EncodeError(f"bad layer {msg.layer}")
    if msg.msg_type not in REGISTERED_TYPES:
        raise EncodeError(f"unregistered msg_type {msg.msg_type}")
    try:
        header = HEADER.pack(
            msg.version,
            msg.layer,
            msg.msg_type,
            msg.flags,
            msg.src,
            msg.cluster_id,
            msg.seq,
            msg.timestamp_ns,
            len(msg.payload),
        )
    except struct.error as exc:
        raise EncodeError(str(exc)) from exc
    return header + bytes(msg.payload)


def decode(data: bytes) -> WireMessage:
    if len(data) < HEADER_LEN:
        raise ShortHeader(len(data))
    version, layer, msg_type, flags, src, cluster_id, seq, ts, plen = HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(version)
    if layer > MessageLayer.MANAGEMENT:
        raise BadLayer(layer)
    if len(data) - HEADER_LEN != plen:
        raise LengthMismatch(plen, len(data) - HEADER_LEN)
    if msg_type not in REGISTERED_TYPES:
        raise UnknownMsgType(msg_type)
    return WireMessage(
        layer=layer,
        msg_type=msg_type,
        src=src,
        cluster_id=cluster_id,
        seq=seq,
        timestamp_ns=ts,
        payload=bytes(data[HEADER_LEN:]),
        flags=flags,
        version=version,
    )


def frame_stream(data: bytes) -> bytes:
    """Length-prefix an encoded message for the reliable stream."""
    return struct.pack(">I", len(data)) + data
