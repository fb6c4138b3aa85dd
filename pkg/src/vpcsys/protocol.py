"""Payload layouts carried inside WireMessage, all big-endian."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .domain import DEFAULT_LAYER, MsgType, VpcError
from .transport.wire import WireMessage
from .vpf import VpfDescriptor, decode_descriptor, encode_descriptor


class PayloadError(VpcError, ValueError):
    pass


def _unpack(fmt: struct.Struct, data: bytes, offset: int = 0):
    try:
        return fmt.unpack_from(data, offset)
    except struct.error as exc:
        raise PayloadError(str(exc)) from exc


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack(">H", len(b)) + b


def _unpack_str(data: bytes, pos: int) -> Tuple[str, int]:
    (n,) = _unpack(_U16, data, pos)
    pos += 2
    if pos + n > len(data):
        raise PayloadError("truncated string")
    return bytes(data[pos : pos + n]).decode(), pos + n


_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


def make(
    msg_type: MsgType,
    src: int,
    payload: bytes = b"",
    *,
    cluster_id: int = 0,
    seq: int = 0,
    timestamp_ns: int = 0,
    flags: int = 0,
) -> WireMessage:
    return WireMessage(
        layer=int(DEFAULT_LAYER[msg_type]),
        msg_type=int(msg_type),
        src=src,
        cluster_id=cluster_id,
        seq=seq,
        timestamp_ns=timestamp_ns,
        payload=payload,
        flags=flags,
    )


def bit_payload(bit: int) -> bytes:
    return bytes((bit,))


def read_bit(msg: WireMessage) -> int:
    if len(msg.payload) != 1:
        raise PayloadError(f"expected 1-byte payload, got {len(msg.payload)}")
    return msg.payload[0]


# -- control layer ---------------------------------------------------------


@dataclass(frozen=True)
class VpfSnapshot:
    vpf_id: int
    version: int
    counter: int
    last_input: int


_SNAP = struct.Struct(">IIQB")


@dataclass(frozen=True)
class StateSyncPayload:
    last_processed_seq: int
    vpfs: Tuple[VpfSnapshot, ...] = ()

    def encode(self) -> bytes:
        parts = [_U32.pack(self.last_processed_seq), _U8.pack(len(self.vpfs))]
        parts += [_SNAP.pack(v.vpf_id, v.version, v.counter, v.last_input) for v in self.vpfs]
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "StateSyncPayload":
        (seq,) = _unpack(_U32, data)
        (n,) = _unpack(_U8, data, 4)
        if len(data) != 5 + n * _SNAP.size:
            raise PayloadError("StateSync length mismatch")
        snaps = tuple(VpfSnapshot(*_SNAP.unpack_from(data, 5 + i * _SNAP.size)) for i in range(n))
        return cls(seq, snaps)


SYNC_CONSISTENT = 0
SYNC_ADOPTED = 1
SYNC_AHEAD = 2
_ACK = struct.Struct(">IB")


@dataclass(frozen=True)
class SyncAckPayload:
    last_processed_seq: int
    status: int = SYNC_CONSISTENT

    def encode(self) -> bytes:
        return _ACK.pack(self.last_processed_seq, self.status)

    @classmethod
    def decode(cls, data: bytes) -> "SyncAckPayload":
        return cls(*_unpack(_ACK, data))


_HCMD = struct.Struct(">II")


@dataclass(frozen=True)
class HandoverCmdPayload:
    boundary_seq: int
    new_cluster_id: int

    def encode(self) -> bytes:
        return _HCMD.pack(self.boundary_seq, self.new_cluster_id)

    @classmethod
    def decode(cls, data: bytes) -> "HandoverCmdPayload":
        return cls(*_unpack(_HCMD, data))


ACK_OK = 0
ACK_REJECTED = 1
_HACK = struct.Struct(">IBI")


@dataclass(frozen=True)
class HandoverAckPayload:
    boundary_seq: int
    status: int
    last_processed_seq: int

    @property
    def ok(self) -> bool:
        return self.status == ACK_OK

    def encode(self) -> bytes:
        return _HACK.pack(self.boundary_seq, self.status, self.last_processed_seq)

    @classmethod
    def decode(cls, data: bytes) -> "HandoverAckPayload":
        return cls(*_unpack(_HACK, data))


def encode_u32(v: int) -> bytes:
    return _U32.pack(v)


def decode_u32(data: bytes) -> int:
    return _unpack(_U32, data)[0]


_PROBE_REPLY = struct.Struct(">QQQ")


def encode_probe(t1: int) -> bytes:
    return _U64.pack(t1)


def decode_probe(data: bytes) -> int:
    return _unpack(_U64, data)[0]


def encode_probe_reply(t1: int, t2: int, t3: int) -> bytes:
    return _PROBE_REPLY.pack(t1, t2, t3)


def decode_probe_reply(data: bytes) -> Tuple[int, int, int]:
    return _unpack(_PROBE_REPLY, data)


#: HandoverCmd header flag: the old leader has accepted this boundary, so the
#: new leader may transmit from it on.
FLAG_CONFIRM = 0x02


# -- management layer ------------------------------------------------------

#: DeployVpc header flag: the addressee joins a live cluster as a backup.
FLAG_JOIN = 0x01

_DEPLOY_HEAD = struct.Struct(">IIBB")
_PEER = struct.Struct(">II")
_SYNC_CFG = struct.Struct(">HHI")


@dataclass(frozen=True)
class DeployVpcPayload:
    """Deploy instances (to an IR), update membership (to an instance) or set
    the input subscription (to an ICPS).

    ``peers`` is the ordered membership as (node_id, ir_id); the first entry
    is the cluster's leader.  ``sources`` are nodes whose StateSync a fresh
    instance may adopt state from.
    """

    workflow_id: int
    cluster_id: int
    role: int
    peers: Tuple[Tuple[int, int], ...]
    sources: Tuple[int, ...] = ()
    sync_timeout_cycles: int = 2
    ready_window: int = 5
    sync_interval_ns: int = 1_000_000

    def encode(self) -> bytes:
        parts = [_DEPLOY_HEAD.pack(self.workflow_id, self.cluster_id, self.role, len(self.peers))]
        parts += [_PEER.pack(n, ir) for n, ir in self.peers]
        parts.append(_U8.pack(len(self.sources)))
        parts += [_U32.pack(n) for n in self.sources]
        parts.append(_SYNC_CFG.pack(self.sync_timeout_cycles, self.ready_window, self.sync_interval_ns))
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "DeployVpcPayload":
        wf, cid, role, npeers = _unpack(_DEPLOY_HEAD, data)
        pos = _DEPLOY_HEAD.size
        peers = []
        for _ in range(npeers):
            peers.append(_unpack(_PEER, data, pos))
            pos += _PEER.size
        (nsrc,) = _unpack(_U8, data, pos)
        pos += 1
        sources = []
        for _ in range(nsrc):
            sources.append(_unpack(_U32, data, pos)[0])
            pos += 4
        k, window, interval = _unpack(_SYNC_CFG, data, pos)
        if pos + _SYNC_CFG.size != len(data):
            raise PayloadError("DeployVpc length mismatch")
        return cls(wf, cid, role, tuple(peers), tuple(sources), k, window, interval)

    @property
    def member_ids(self) -> List[int]:
        return [n for n, _ in self.peers]


@dataclass(frozen=True)
class AssignVpfPayload:
    workflow_id: int
    descriptors: Tuple[VpfDescriptor, ...]

    def encode(self) -> bytes:
        return _U32.pack(self.workflow_id) + b"".join(encode_descriptor(d) for d in self.descriptors)

    @classmethod
    def decode(cls, data: bytes) -> "AssignVpfPayload":
        (wf,) = _unpack(_U32, data)
        pos = 4
        descs = []
        while pos < len(data):
            d, pos = decode_descriptor(data, pos)
            descs.append(d)
        return cls(wf, tuple(descs))


_LOOKUP = struct.Struct(">III")


@dataclass(frozen=True)
class VpfLookup:
    """Registry get request, sent as AssignVpf with only (vpf_id, version)."""

    workflow_id: int
    vpf_id: int
    version: int

    def encode(self) -> bytes:
        return _LOOKUP.pack(self.workflow_id, self.vpf_id, self.version)

    @classmethod
    def matches(cls, data: bytes) -> bool:
        return len(data) == _LOOKUP.size

    @classmethod
    def decode(cls, data: bytes) -> "VpfLookup":
        return cls(*_unpack(_LOOKUP, data))


_REL = struct.Struct(">II")


@dataclass(frozen=True)
class ReleaseClusterPayload:
    workflow_id: int
    cluster_id: int

    def encode(self) -> bytes:
        return _REL.pack(self.workflow_id, self.cluster_id)

    @classmethod
    def decode(cls, data: bytes) -> "ReleaseClusterPayload":
        return cls(*_unpack(_REL, data))


_RECONF = struct.Struct(">III")


@dataclass(frozen=True)
class ReconfigureRequestPayload:
    cluster_id: int
    vpf_id: int
    version: int

    def encode(self) -> bytes:
        return _RECONF.pack(self.cluster_id, self.vpf_id, self.version)

    @classmethod
    def decode(cls, data: bytes) -> "ReconfigureRequestPayload":
        return cls(*_unpack(_RECONF, data))


@dataclass(frozen=True)
class RedeployRequestPayload:
    cluster_id: int
    site: str

    def encode(self) -> bytes:
        return _U32.pack(self.cluster_id) + _pack_str(self.site)

    @classmethod
    def decode(cls, data: bytes) -> "RedeployRequestPayload":
        (cid,) = _unpack(_U32, data)
        site, _ = _unpack_str(data, 4)
        return cls(cid, site)


_STATUS = struct.Struct(">IB")


@dataclass(frozen=True)
class WorkflowStatusPayload:
    workflow_id: int
    phase: int
    detail: str = ""

    def encode(self) -> bytes:
        return _STATUS.pack(self.workflow_id, self.phase) + _pack_str(self.detail)

    @classmethod
    def decode(cls, data: bytes) -> "WorkflowStatusPayload":
        wf, phase = _unpack(_STATUS, data)
        detail, _ = _unpack_str(data, _STATUS.size)
        return cls(wf, phase, detail)

    def event(self) -> Tuple[str, Optional[int]]:
        """Split details like ``takeover:101`` into ("takeover", 101)."""
        name, _, arg = self.detail.partition(":")
        try:
            return name, int(arg) if arg else None
        except ValueError:
            return name, None


_IR = struct.Struct(">IIIB")


@dataclass(frozen=True)
class IrCapabilities:
    cpu_score: int = 100
    mem_mb: int = 4096
    supports_raw_frame: bool = True
    site: str = "hall-A"


@dataclass(frozen=True)
class IrRegisterPayload:
    ir_id: int
    caps: IrCapabilities = field(default_factory=IrCapabilities)

    def encode(self) -> bytes:
        c = self.caps
        return _IR.pack(self.ir_id, c.cpu_score, c.mem_mb, int(c.supports_raw_frame)) + _pack_str(c.site)

    @classmethod
    def decode(cls, data: bytes) -> "IrRegisterPayload":
        ir_id, cpu, mem, raw = _unpack(_IR, data)
        site, _ = _unpack_str(data, _IR.size)
        return cls(ir_id, IrCapabilities(cpu, mem, bool(raw), site))


def encode_capability_reply(reg: Optional[IrRegisterPayload], ir_id: int) -> bytes:
    if reg is None:
        return b"\x00" + _U32.pack(ir_id)
    return b"\x01" + reg.encode()


def decode_capability_reply(data: bytes) -> Tuple[bool, Optional[IrRegisterPayload], int]:
    if not data:
        raise PayloadError("empty capability reply")
    if data[0] == 0:
        return False, None, decode_u32(data[1:])
    reg = IrRegisterPayload.decode(data[1:])
    return True, reg, reg.ir_id
