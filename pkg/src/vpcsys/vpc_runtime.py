"""The VPC instance: hot-standby execution, state sync, failover and
sequence-boundary handover.

``VpcInstance`` is a pure state machine: every handler takes the current
time and returns the messages to send as ``(dest, WireMessage)`` pairs.
``VpcActor`` adds the periodic sync timer, ``IrAgent`` hosts instances on an
infrastructure resource.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import protocol as p
from .domain import MS, MsgType, VpcRole
from .protocol import IrCapabilities
from .runtime import Actor
from .transport.wire import WireMessage
from .vpf import DomainViolation, UnknownVpfKind, VpfDescriptor, VpfState, run_chain

log = logging.getLogger(__name__)

Outgoing = Tuple[int, WireMessage]


@dataclass
class ClusterConfig:
    cluster_id: int
    members: List[int]
    sync_timeout_cycles: int = 2
    ready_window: int = 5
    sync_interval_ns: int = MS

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("cluster needs at least one member")
        if self.sync_timeout_cycles < 1:
            raise ValueError("sync_timeout_cycles must be >= 1")
        if self.ready_window < 1:
            raise ValueError("ready_window must be >= 1")
        if self.sync_interval_ns <= 0:
            raise ValueError("sync interval must be positive")

    @property
    def m_backups(self) -> int:
        return len(self.members) - 1

    @property
    def timeout_ns(self) -> int:
        return self.sync_timeout_cycles * self.sync_interval_ns


@dataclass
class VpfSlot:
    desc: VpfDescriptor
    state: VpfState = field(default_factory=VpfState)


class VpcInstance:
    def __init__(
        self,
        node: int,
        cluster: ClusterConfig,
        role: VpcRole,
        vpfs: Sequence[VpfDescriptor],
        *,
        vpcmo: int = 0,
        leader: Optional[int] = None,
        sources: Sequence[int] = (),
        join: bool = False,
        now: int = 0,
    ) -> None:
        self.node = node
        self.cluster = cluster
        self.role = VpcRole(role)
        self.slots = [VpfSlot(d) for d in vpfs]
        self.vpcmo = vpcmo
        if self.role == VpcRole.ACTIVE:
            self.leader_id = node
        else:
            self.leader_id = leader if leader is not None else cluster.members[0]
        self.join = join
        self.sources = list(sources)
        self.last_processed_seq = 0
        self.last_sync_rx = now
        self.handover_boundary: Optional[int] = None
        self.accepted_boundary: Optional[int] = None
        self.handover_confirmed = False
        self.peer_heard: Dict[int, int] = {m: now for m in cluster.members if m != node}
        self.observers: Dict[int, int] = {}
        self.window = 0
        self.ready_sent = False
        self.source_synced = not self.sources
        self.lost_reported: set = set()
        self.divergences = 0
        self.outputs_sent = 0
        self.term = 0
        self.pauses = 0
        self._last_event = now
        self._ctl_seq = 0

    # -- helpers -----------------------------------------------------
    @property
    def cluster_id(self) -> int:
        return self.cluster.cluster_id

    @property
    def is_leader(self) -> bool:
        if self.role == VpcRole.ACTIVE:
            return True
        return self.role == VpcRole.SHADOW and not self.join and self.leader_id == self.node

    @property
    def failover_eligible(self) -> bool:
        return self.role in (VpcRole.INACTIVE, VpcRole.SHADOW) and not self.join and not self.is_leader

    @property
    def states(self) -> List[VpfState]:
        return [s.state for s in self.slots]

    def _msg(self, msg_type: MsgType, payload: bytes, now: int, seq: Optional[int] = None) -> WireMessage:
        if seq is None:
            self._ctl_seq = (self._ctl_seq + 1) & 0xFFFFFFFF
            seq = self._ctl_seq
        return p.make(msg_type, self.node, payload, cluster_id=self.cluster_id, seq=seq, timestamp_ns=now)

    def _status(self, now: int, detail: str, workflow_id: int = 0) -> List[Outgoing]:
        if not self.vpcmo:
            return []
        body = p.WorkflowStatusPayload(workflow_id, int(self.role), detail).encode()
        return [(self.vpcmo, self._msg(MsgType.WORKFLOW_STATUS, body, now))]

    def transmits(self, seq: int) -> bool:
        """Whether this instance holds transmit right for seq."""
        if self.role == VpcRole.ACTIVE:
            return self.handover_boundary is None or seq < self.handover_boundary
        if self.role == VpcRole.SHADOW and self.is_leader and self.handover_boundary is not None:
            return seq >= self.handover_boundary and self.handover_confirmed
        return False

    def snapshot(self) -> p.StateSyncPayload:
        return p.StateSyncPayload(
            self.last_processed_seq,
            tuple(
                p.VpfSnapshot(s.desc.vpf_id, s.desc.version, s.state.counter, s.state.last_input)
                for s in self.slots
            ),
        )

    def observe(self, now: int) -> None:
        """Notice when this instance itself was not scheduled.

        Silence seen across such a gap says nothing about the peers, so the
        failure detectors restart their windows instead of firing.
        """
        gap = now - self._last_event
        self._last_event = now
        if gap > 3 * self.cluster.sync_interval_ns // 2:
            self.pauses += 1
            log.debug("node %d: not scheduled for %d us", self.node, gap // 1000)
            self.last_sync_rx = max(self.last_sync_rx, now)
            for m in self.peer_heard:
                self.peer_heard[m] = max(self.peer_heard[m], now)

    def _sync_msg(self, now: int) -> WireMessage:
        # the header seq of a StateSync carries the leadership term
        return self._msg(MsgType.STATE_SYNC, self.snapshot().encode(), now, self.term)

    # -- data path -----------------------------------------------------
    def on_sensor_input(self, msg: WireMessage, now: int) -> List[Outgoing]:
        out: List[Outgoing] = []
        if self.role == VpcRole.RELEASED:
            return out
        if self.failover_eligible:
            out += self.check_failover(now)
        seq = msg.seq
        if seq <= self.last_processed_seq:
            return out
        try:
            value, states = run_chain(((s.desc, s.state) for s in self.slots), p.read_bit(msg))
        except UnknownVpfKind as exc:
            log.error("node %d: %s; releasing", self.node, exc)
            out += self.release(now, "unknown-vpf")
            return out
        except (DomainViolation, p.PayloadError) as exc:
            log.warning("node %d: ignoring input %d: %s", self.node, seq, exc)
            return out
        gap = self.last_processed_seq != 0 and seq != self.last_processed_seq + 1
        for slot, st in zip(self.slots, states):
            slot.state = st
        self.last_processed_seq = seq

        if self.transmits(seq):
            out.append((msg.src, self._msg(MsgType.ACTUATOR_OUTPUT, p.bit_payload(value), now, seq)))
            self.outputs_sent += 1
            if self.role == VpcRole.SHADOW:
                self.role = VpcRole.ACTIVE
                self.handover_boundary = None
                out += self._status(now, f"transmitting:{seq}")
        elif (
            self.role == VpcRole.SHADOW
            and not self.join
            and not self.is_leader
            and self.handover_boundary is not None
            and seq >= self.handover_boundary
        ):
            # an unconfirmed leader stays silent in Shadow until confirmed or rebased
            self.role = VpcRole.INACTIVE
            self.handover_boundary = None
            self.last_sync_rx = now

        if (
            self.role in (VpcRole.ACTIVE, VpcRole.INACTIVE)
            and self.handover_boundary is not None
            and seq >= self.handover_boundary - 1
        ):
            out += self.release(now, "handover")
        elif self.role == VpcRole.SHADOW:
            out += self.shadow_warmup(now, gap)
        return out

    def shadow_warmup(self, now: int, gap: bool = False) -> List[Outgoing]:
        """Count consecutive inputs; announce readiness once the window fills."""
        if self.role != VpcRole.SHADOW:
            return []
        self.window = 1 if gap else self.window + 1
        if self.ready_sent or self.window < self.cluster.ready_window or not self.source_synced:
            return []
        self.ready_sent = True
        if not self.vpcmo:
            return []
        body = p.encode_u32(self.last_processed_seq)
        return [(self.vpcmo, self._msg(MsgType.READY_TO_TAKEOVER, body, now))]

    # -- control path --------------------------------------------------
    def sync_tick(self, now: int) -> List[Outgoing]:
        if self.role == VpcRole.RELEASED:
            return []
        self.observe(now)
        out: List[Outgoing] = []
        if self.failover_eligible:
            out += self.check_failover(now)
        ack = p.SyncAckPayload(self.last_processed_seq).encode()
        if self.is_leader:
            out += self._leader_tick(now)
        else:
            # liveness heartbeat for the lowest-id tie-break
            for m in self.cluster.members:
                if m not in (self.node, self.leader_id):
                    out.append((m, self._msg(MsgType.SYNC_ACK, ack, now)))
            if self.join:
                out.append((self.leader_id, self._msg(MsgType.SYNC_ACK, ack, now)))
        if self.role == VpcRole.SHADOW:
            for s in self.sources:
                if s not in self.cluster.members:
                    out.append((s, self._msg(MsgType.SYNC_ACK, ack, now)))
        return out

    def _leader_tick(self, now: int) -> List[Outgoing]:
        out: List[Outgoing] = []
        body = self.snapshot().encode()
        live = self.live_window
        self.observers = {n: t for n, t in self.observers.items() if now - t <= live}
        targets = [m for m in self.cluster.members if m != self.node] + list(self.observers)
        for m in targets:
            out.append((m, self._msg(MsgType.STATE_SYNC, body, now, self.term)))
        if self.role == VpcRole.ACTIVE:
            lost_after = 2 * live
            for m in self.cluster.members:
                if m == self.node or m in self.lost_reported:
                    continue
                if now - self.peer_heard.get(m, now) > lost_after:
                    self.lost_reported.add(m)
                    out += self._status(now, f"member-lost:{m}")
        return out

    @property
    def live_window(self) -> int:
        return (self.cluster.sync_timeout_cycles + 1) * self.cluster.sync_interval_ns

    def check_failover(self, now: int) -> List[Outgoing]:
        """Promote on sync silence unless a lower-id peer is still alive."""
        if not self.failover_eligible:
            return []
        if now - self.last_sync_rx <= self.cluster.timeout_ns:
            return []
        live = self.live_window
        lower_live = [
            m
            for m in self.cluster.members
            if m < self.node and m != self.leader_id and now - self.peer_heard.get(m, -live - 1) <= live
        ]
        if lower_live:
            self.last_sync_rx = now
            return []
        previous = self.leader_id
        self.leader_id = self.node
        self.term += 1
        if self.role == VpcRole.INACTIVE:
            self.role = VpcRole.ACTIVE
        self.lost_reported.add(previous)
        log.info(
            "node %d: took over from %d in cluster %d after %d us of silence",
            self.node, previous, self.cluster_id, (now - self.last_sync_rx) // 1000,
        )
        return self._status(now, f"takeover:{previous}")

    def on_state_sync(self, msg: WireMessage, now: int) -> List[Outgoing]:
        if self.role == VpcRole.RELEASED:
            return []
        sender = msg.src
        payload = p.StateSyncPayload.decode(msg.payload)
        from_source = sender in self.sources
        if msg.cluster_id == self.cluster_id and sender in self.cluster.members:
            self.peer_heard[sender] = now
            term = msg.seq
            if term < self.term and not self.join:
                # a deposed leader; show it the current term so it steps down
                if self.is_leader:
                    return [(sender, self._sync_msg(now))]
                return []
            if self.is_leader and not self.join:
                if term == self.term and sender > self.node:
                    return []
                # a newer or lower-id leader exists: step back
                if self.role == VpcRole.ACTIVE:
                    self.role = VpcRole.INACTIVE
                log.warning("node %d: yielding leadership to %d (term %d)", self.node, sender, term)
            self.term = term
            self.leader_id = sender
            self.last_sync_rx = now
            status, diverged = self._adopt(payload)
            if from_source:
                self.source_synced = True
            out = [(sender, self._msg(MsgType.SYNC_ACK, p.SyncAckPayload(self.last_processed_seq, status).encode(), now))]
            if diverged:
                out += self._status(now, f"divergence:{payload.last_processed_seq}")
            return out
        if from_source and self.role == VpcRole.SHADOW:
            self._adopt(payload)
            self.source_synced = True
        return []

    def _adopt(self, payload: p.StateSyncPayload) -> Tuple[int, bool]:
        """Reconcile with a leader snapshot; returns (SyncAck status, diverged)."""
        local = self.last_processed_seq
        if payload.last_processed_seq < local:
            return p.SYNC_AHEAD, False
        by_key = {(v.vpf_id, v.version): v for v in payload.vpfs}
        matched = [(s, by_key.get((s.desc.vpf_id, s.desc.version))) for s in self.slots]
        if any(v is None for _, v in matched):
            return p.SYNC_CONSISTENT, False
        changed = False
        for slot, snap in matched:
            st = VpfState(snap.counter, snap.last_input)
            if st != slot.state:
                slot.state = st
                changed = True
        if payload.last_processed_seq > local:
            self.last_processed_seq = payload.last_processed_seq
            return p.SYNC_ADOPTED, False
        if changed:
            self.divergences += 1
            return p.SYNC_ADOPTED, True
        return p.SYNC_CONSISTENT, False

    def on_sync_ack(self, msg: WireMessage, now: int) -> List[Outgoing]:
        if msg.cluster_id == self.cluster_id and msg.src in self.cluster.members:
            self.peer_heard[msg.src] = now
        elif self.is_leader:
            self.observers[msg.src] = now
        return []

    def handle_handover_cmd(self, msg: WireMessage, now: int) -> List[Outgoing]:
        cmd = p.HandoverCmdPayload.decode(msg.payload)
        if self.accepted_boundary == cmd.boundary_seq:
            status = p.ACK_OK
        elif self.role == VpcRole.RELEASED or cmd.boundary_seq <= self.last_processed_seq:
            status = p.ACK_REJECTED
        else:
            self.handover_boundary = self.accepted_boundary = cmd.boundary_seq
            self.handover_confirmed = False
            status = p.ACK_OK
        if status == p.ACK_OK and msg.flags & p.FLAG_CONFIRM:
            self.handover_confirmed = True
        ack = p.HandoverAckPayload(cmd.boundary_seq, status, self.last_processed_seq)
        return [(msg.src, self._msg(MsgType.HANDOVER_ACK, ack.encode(), now))]

    def on_membership(self, deploy: p.DeployVpcPayload, now: int) -> List[Outgoing]:
        """Apply a membership/role update from the orchestrator."""
        if self.role == VpcRole.RELEASED:
            return []
        members = deploy.member_ids
        if self.node not in members:
            return []
        self.cluster.members = members
        self.peer_heard = {m: self.peer_heard.get(m, now) for m in members if m != self.node}
        self.lost_reported &= set(members)
        role = VpcRole(deploy.role)
        if self.role == VpcRole.SHADOW and role == VpcRole.INACTIVE:
            self.role = VpcRole.INACTIVE
            self.join = False
            self.leader_id = members[0]
            self.last_sync_rx = now
        return []

    def release(self, now: int, reason: str = "") -> List[Outgoing]:
        if self.role == VpcRole.RELEASED:
            return []
        self.role = VpcRole.RELEASED
        return self._status(now, f"released:{reason}" if reason else "released")

    def handle(self, msg: WireMessage, now: int) -> List[Outgoing]:
        self.observe(now)
        t = msg.msg_type
        if t == MsgType.SENSOR_INPUT:
            return self.on_sensor_input(msg, now)
        if t == MsgType.STATE_SYNC:
            return self.on_state_sync(msg, now)
        if t == MsgType.SYNC_ACK:
            return self.on_sync_ack(msg, now)
        if t == MsgType.HANDOVER_CMD:
            return self.handle_handover_cmd(msg, now)
        if t == MsgType.DEPLOY_VPC:
            return self.on_membership(p.DeployVpcPayload.decode(msg.payload), now)
        if t == MsgType.RELEASE_CLUSTER:
            return self.release(now, "ordered")
        log.debug("node %d: ignoring %s", self.node, msg.describe())
        return []


def first_tick(now: int, interval: int) -> int:
    """Next point on the half-interval grid, so ticks fall between inputs."""
    phase = interval // 2
    return ((now - phase) // interval + 1) * interval + phase


class VpcActor(Actor):
    def __init__(self, instance: VpcInstance) -> None:
        self.instance = instance
        self.node_id = instance.node
        self._next_tick = 0

    def start(self) -> None:
        now = self.now()
        self.instance.last_sync_rx = now
        self.instance._last_event = now
        for m in self.instance.peer_heard:
            self.instance.peer_heard[m] = now
        self._next_tick = first_tick(now, self.instance.cluster.sync_interval_ns)
        self.ctx.call_at(self._next_tick, self._tick)

    def _tick(self) -> None:
        inst = self.instance
        if inst.role == VpcRole.RELEASED:
            return
        self.send_all(inst.sync_tick(self.now()))
        self._next_tick += inst.cluster.sync_interval_ns
        self.ctx.call_at(self._next_tick, self._tick)

    def on_message(self, msg: WireMessage, sender: int) -> None:
        self.send_all(self.instance.handle(msg, self.now()))

    def release(self, reason: str = "") -> None:
        self.send_all(self.instance.release(self.now(), reason))


@dataclass
class _Pending:
    deploy: p.DeployVpcPayload
    flags: int


class IrAgent(Actor):
    """Host agent on one infrastructure resource.

    Deploys instances on DeployVpc + AssignVpf, releases them on
    ReleaseCluster and answers capability queries.  Duplicate commands for a
    workflow are acknowledged again without deploying twice.
    """

    def __init__(self, ir_id: int, caps: IrCapabilities, vpcmo: int = 0, register: bool = False) -> None:
        self.node_id = ir_id
        self.caps = caps
        self.vpcmo = vpcmo
        self.register = register
        self.hosted: Dict[int, VpcActor] = {}
        self.pending: Dict[int, List[_Pending]] = {}
        self._seq = 0

    def hosted_nodes(self) -> List[int]:
        return list(self.hosted)

    def start(self) -> None:
        if self.register and self.vpcmo:
            body = p.IrRegisterPayload(self.node_id, self.caps).encode()
            self.send(self.vpcmo, self._msg(MsgType.IR_REGISTER, body))

    def _msg(self, t: MsgType, body: bytes, cluster_id: int = 0) -> WireMessage:
        self._seq += 1
        return p.make(t, self.node_id, body, cluster_id=cluster_id, seq=self._seq, timestamp_ns=self.now())

    def _status(self, workflow_id: int, detail: str, cluster_id: int = 0) -> None:
        if self.vpcmo:
            body = p.WorkflowStatusPayload(workflow_id, 0, detail).encode()
            self.send(self.vpcmo, self._msg(MsgType.WORKFLOW_STATUS, body, cluster_id))

    def host(self, instance: VpcInstance) -> VpcActor:
        actor = VpcActor(instance)
        self.hosted[instance.node] = actor
        self.ctx.spawn(actor)
        return actor

    def on_message(self, msg: WireMessage, sender: int) -> None:
        t = msg.msg_type
        log.debug("ir %d: %s from %d", self.node_id, msg.describe(), sender)
        if t == MsgType.DEPLOY_VPC:
            d = p.DeployVpcPayload.decode(msg.payload)
            self.pending.setdefault(d.workflow_id, []).append(_Pending(d, msg.flags))
        elif t == MsgType.ASSIGN_VPF:
            a = p.AssignVpfPayload.decode(msg.payload)
            for pend in self.pending.pop(a.workflow_id, []):
                self._deploy(pend, a)
        elif t == MsgType.RELEASE_CLUSTER:
            r = p.ReleaseClusterPayload.decode(msg.payload)
            for node, actor in list(self.hosted.items()):
                if actor.instance.cluster_id == r.cluster_id:
                    # runs on the instance's own loop, not this one
                    actor.ctx.call_later(0, actor.release, "ordered")
                    del self.hosted[node]
                    self._status(r.workflow_id, f"released:{node}", r.cluster_id)
        elif t == MsgType.IR_CAPABILITY_QUERY:
            ir = p.decode_u32(msg.payload)
            reg = p.IrRegisterPayload(self.node_id, self.caps) if ir == self.node_id else None
            self.send(sender, self._msg(MsgType.IR_CAPABILITY_REPLY, p.encode_capability_reply(reg, ir)))

    def _deploy(self, pend: _Pending, assign: p.AssignVpfPayload) -> None:
        d = pend.deploy
        now = self.now()
        for node, ir in d.peers:
            if ir != self.node_id:
                continue
            if node not in self.hosted:
                cfg = ClusterConfig(
                    d.cluster_id, d.member_ids, d.sync_timeout_cycles, d.ready_window, d.sync_interval_ns
                )
                inst = VpcInstance(
                    node,
                    cfg,
                    VpcRole(d.role),
                    assign.descriptors,
                    vpcmo=self.vpcmo,
                    leader=d.peers[0][0],
                    sources=d.sources,
                    join=bool(pend.flags & p.FLAG_JOIN),
                    now=now,
                )
                self.host(inst)
                log.debug("ir %d: hosting %d", self.node_id, node)
            self._status(d.workflow_id, f"deployed:{node}", d.cluster_id)
