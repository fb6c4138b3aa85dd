"""Management and orchestration: IR inventory, placement and the
reconfigure / redeploy / restore-redundancy workflows."""

from __future__ import annotations

import enum
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

from . import protocol as p
from .domain import MS, SEC, MsgType, VpcError, VpcRole
from .protocol import IrCapabilities
from .runtime import Actor
from .transport.wire import WireMessage
from .vpf import VpfDescriptor, VpfNotFound, VpfRegistry

log = logging.getLogger(__name__)


class PlacementError(VpcError):
    pass


class DuplicateIr(VpcError):
    pass


class IrNotFound(VpcError, KeyError):
    def __str__(self) -> str:
        return self.args[0]


class WorkflowKind(enum.IntEnum):
    RECONFIGURE = 0
    REDEPLOY = 1
    RESTORE_REDUNDANCY = 2


class Phase(enum.IntEnum):
    DEPLOYING = 0
    SYNCING = 1
    READY = 2
    HANDOVER_ISSUED = 3
    COMMITTED = 4
    RELEASED = 5
    FAILED = 6


TERMINAL = frozenset({Phase.COMMITTED, Phase.RELEASED, Phase.FAILED})


class PhaseError(VpcError):
    pass


_REC = struct.Struct(">IBBIIBI")


@dataclass
class WorkflowRecord:
    workflow_id: int
    kind: WorkflowKind
    phase: Phase = Phase.DEPLOYING
    old_cluster: int = 0
    new_cluster: int = 0
    boundary_seq: Optional[int] = None
    detail: str = ""

    def advance(self, phase: Phase, detail: str = "") -> None:
        phase = Phase(phase)
        if self.phase == Phase.FAILED or self.phase == Phase.RELEASED:
            raise PhaseError(f"workflow {self.workflow_id} already {self.phase.name}")
        if phase != Phase.FAILED and phase <= self.phase:
            raise PhaseError(f"workflow {self.workflow_id}: {self.phase.name} -> {phase.name} goes backwards")
        self.phase = phase
        if detail:
            self.detail = detail

    @property
    def done(self) -> bool:
        return self.phase in TERMINAL

    def encode(self) -> bytes:
        has_b = self.boundary_seq is not None
        head = _REC.pack(
            self.workflow_id, int(self.kind), int(self.phase), self.old_cluster, self.new_cluster,
            int(has_b), self.boundary_seq if has_b else 0,
        )
        d = self.detail.encode()
        return head + struct.pack(">H", len(d)) + d

    @classmethod
    def decode(cls, data: bytes) -> "WorkflowRecord":
        try:
            wf, kind, phase, old, new, has_b, boundary = _REC.unpack_from(data)
            (n,) = struct.unpack_from(">H", data, _REC.size)
        except struct.error as exc:
            raise p.PayloadError(f"bad workflow record: {exc}") from exc
        detail = bytes(data[_REC.size + 2 : _REC.size + 2 + n]).decode()
        return cls(wf, WorkflowKind(kind), Phase(phase), old, new, boundary if has_b else None, detail)


class WorkflowLog:
    """Append-only file of length-prefixed records; the last one per id wins.

    Each record reaches the kernel before the caller acts on it, which covers
    an orchestrator crash. ``sync`` also forces it to disk, at the price of
    waiting on the journal while the real-time hosts hold the CPU.
    """

    def __init__(self, path: Optional[str] = None, sync: bool = False) -> None:
        self.path = path
        self.sync = sync

    def append(self, rec: WorkflowRecord) -> None:
        if self.path is None:
            return
        data = rec.encode()
        with open(self.path, "ab") as fh:
            fh.write(struct.pack(">I", len(data)) + data)
            fh.flush()
            if self.sync:
                os.fsync(fh.fileno())

    def load(self) -> Dict[int, WorkflowRecord]:
        out: Dict[int, WorkflowRecord] = {}
        if self.path is None or not os.path.exists(self.path):
            return out
        with open(self.path, "rb") as fh:
            data = fh.read()
        pos = 0
        while pos + 4 <= len(data):
            (n,) = struct.unpack_from(">I", data, pos)
            if pos + 4 + n > len(data):
                break  # torn tail write
            rec = WorkflowRecord.decode(data[pos + 4 : pos + 4 + n])
            out[rec.workflow_id] = rec
            pos += 4 + n
        return out


@dataclass
class InfrastructureResource:
    ir_id: int
    capabilities: IrCapabilities = field(default_factory=IrCapabilities)
    allocated: List[int] = field(default_factory=list)

    @property
    def site(self) -> str:
        return self.capabilities.site


@dataclass
class ClusterRecord:
    cluster_id: int
    members: List[Tuple[int, int]]  # (node, ir); leader first
    vpfs: Tuple[VpfDescriptor, ...]
    site: str
    size: int
    rt_class: int = 2
    sync_timeout_cycles: int = 2
    ready_window: int = 5
    sync_interval_ns: int = MS
    state: str = "deploying"  # deploying | shadow | live | released
    lost: Set[Tuple[int, int]] = field(default_factory=set)
    successor: int = 0

    @property
    def nodes(self) -> List[int]:
        return [n for n, _ in self.members]

    @property
    def irs(self) -> List[int]:
        return [ir for _, ir in self.members]

    @property
    def leader(self) -> int:
        return self.members[0][0]

    def ir_of(self, node: int) -> Optional[int]:
        for n, ir in list(self.members) + list(self.lost):
            if n == node:
                return ir
        return None


@dataclass
class VpcmoConfig:
    boundary_margin: int = 10
    readiness_timeout_ns: int = SEC
    #: must stay below the margin so an aborted new cluster never transmits
    ack_timeout_cycles: int = 5
    commit_timeout_ns: int = SEC
    restore_backoff_ns: int = 500 * MS
    restore_attempts: int = 5
    first_node_id: int = 100


@dataclass
class _Run:
    rec: WorkflowRecord
    new: ClusterRecord
    old: Optional[ClusterRecord]
    pending_deploy: Set[int]
    requester: int = 0
    leader: int = 0
    new_acked: Set[int] = field(default_factory=set)
    old_acked: Set[int] = field(default_factory=set)
    old_cmd_sent: bool = False
    confirmed: bool = False
    #: bumped whenever the boundary moves, so stale ack timers stand down
    boundary_gen: int = 0
    timers: list = field(default_factory=list)
    joiner: Optional[Tuple[int, int]] = None


class Vpcmo(Actor):
    def __init__(
        self,
        node_id: int,
        registry: VpfRegistry,
        icps: Sequence[int] = (),
        config: Optional[VpcmoConfig] = None,
        log_path: Optional[str] = None,
    ) -> None:
        self.node_id = node_id
        self.registry = registry
        self.icps = list(icps)
        self.cfg = config or VpcmoConfig()
        self.irs: Dict[int, InfrastructureResource] = {}
        self.clusters: Dict[int, ClusterRecord] = {}
        self.workflows: Dict[int, WorkflowRecord] = {}
        self.log = WorkflowLog(log_path)
        self.runs: Dict[int, _Run] = {}
        self.busy: Dict[int, int] = {}  # cluster_id -> workflow_id
        self.queue: Dict[int, List[Tuple[Callable, tuple]]] = {}
        self.restore_attempts: Dict[int, int] = {}
        self.phase_hooks: List[Callable[[WorkflowRecord], None]] = []
        self.events: List[Tuple[int, str, int, str]] = []  # (t, kind, cluster, detail)
        self._initial: Dict[int, Tuple[int, Set[int]]] = {}
        self._next_wf = 1
        self._next_cluster = 1
        self._next_node = self.cfg.first_node_id
        self._seq = 0
        self._recover()

    # -- persistence ---------------------------------------------------
    def _recover(self) -> None:
        for wf, rec in sorted(self.log.load().items()):
            if not rec.done:
                rec.advance(Phase.FAILED, "vpcmo restart")
                self.log.append(rec)
            self.workflows[wf] = rec
            self._next_wf = max(self._next_wf, wf + 1)
            self._next_cluster = max(self._next_cluster, rec.old_cluster + 1, rec.new_cluster + 1)

    def _set_phase(self, run: _Run, phase: Phase, detail: str = "") -> None:
        run.rec.advance(phase, detail)
        self._publish(run)

    def _publish(self, run: _Run) -> None:
        rec = run.rec
        self.log.append(rec)
        log.info("workflow %d (%s): %s %s", rec.workflow_id, rec.kind.name, rec.phase.name, rec.detail)
        if run.requester:
            body = p.WorkflowStatusPayload(rec.workflow_id, int(rec.phase), rec.detail).encode()
            self.send(run.requester, self._msg(MsgType.WORKFLOW_STATUS, body, rec.new_cluster))
        for hook in list(self.phase_hooks):
            hook(rec)

    # -- messaging -----------------------------------------------------
    def _msg(self, t: MsgType, body: bytes, cluster_id: int = 0, flags: int = 0) -> WireMessage:
        self._seq += 1
        return p.make(t, self.node_id, body, cluster_id=cluster_id, seq=self._seq, timestamp_ns=self.now(), flags=flags)

    def _later(self, run: Optional[_Run], delay: int, fn: Callable, *args):
        h = self.ctx.call_later(delay, fn, *args)
        if run is not None:
            run.timers.append(h)
        return h

    # -- IR inventory --------------------------------------------------
    def register_ir(self, ir: InfrastructureResource) -> None:
        if ir.ir_id in self.irs:
            raise DuplicateIr(f"IR {ir.ir_id} already registered")
        self.irs[ir.ir_id] = ir

    def query_ir(self, ir_id: int) -> InfrastructureResource:
        try:
            return self.irs[ir_id]
        except KeyError:
            raise IrNotFound(f"IR {ir_id} not found") from None

    def select_ir(self, site: Optional[str] = None, rt_class: int = 2, exclude: Set[int] = frozenset()) -> int:
        feasible = [
            ir
            for ir in self.irs.values()
            if ir.ir_id not in exclude
            and (site is None or ir.site == site)
            and (rt_class != 3 or ir.capabilities.supports_raw_frame)
        ]
        if not feasible:
            raise PlacementError(f"no feasible IR (site={site}, rt_class={rt_class}, excluded={sorted(exclude)})")
        return min(feasible, key=lambda ir: (len(ir.allocated), ir.ir_id)).ir_id

    def _place(self, count: int, sites: Sequence[Optional[str]], rt_class: int, exclude: Set[int]) -> List[int]:
        last: Optional[PlacementError] = None
        for site in sites:
            chosen: List[int] = []
            ex = set(exclude)
            try:
                for _ in range(count):
                    ir = self.select_ir(site, rt_class, ex)
                    chosen.append(ir)
                    ex.add(ir)
                return chosen
            except PlacementError as exc:
                last = exc
        raise last or PlacementError("no site given")

    def _allocate(self, cluster: ClusterRecord) -> None:
        for ir in cluster.irs:
            if ir in self.irs and cluster.cluster_id not in self.irs[ir].allocated:
                self.irs[ir].allocated.append(cluster.cluster_id)

    def _deallocate(self, cluster_id: int, irs: Sequence[int]) -> None:
        for ir in irs:
            res = self.irs.get(ir)
            if res is not None and cluster_id in res.allocated:
                res.allocated.remove(cluster_id)

    def _new_cluster(
        self, irs: Sequence[int], vpfs, site: str, template: Optional[ClusterRecord] = None, **cfg
    ) -> ClusterRecord:
        cid = self._next_cluster
        self._next_cluster += 1
        members = []
        for ir in irs:
            members.append((self._next_node, ir))
            self._next_node += 1
        if template is not None:
            cfg = dict(
                rt_class=template.rt_class,
                sync_timeout_cycles=template.sync_timeout_cycles,
                ready_window=template.ready_window,
                sync_interval_ns=template.sync_interval_ns,
            )
        rec = ClusterRecord(cid, members, tuple(vpfs), site, len(members), **cfg)
        self.clusters[cid] = rec
        self._allocate(rec)
        return rec

    # -- deployment primitives -----------------------------------------
    def _deploy_payload(self, wf: int, c: ClusterRecord, role: VpcRole, peers=None, sources=()) -> bytes:
        return p.DeployVpcPayload(
            wf, c.cluster_id, int(role), tuple(peers if peers is not None else c.members), tuple(sources),
            c.sync_timeout_cycles, c.ready_window, c.sync_interval_ns,
        ).encode()

    def _send_deploy(self, wf: int, c: ClusterRecord, targets, roles, peers=None, sources=(), flags=0) -> None:
        assign = p.AssignVpfPayload(wf, c.vpfs).encode()
        for (node, ir), role in zip(targets, roles):
            body = self._deploy_payload(wf, c, role, peers, sources)
            self.send(ir, self._msg(MsgType.DEPLOY_VPC, body, c.cluster_id, flags))
            self.send(ir, self._msg(MsgType.ASSIGN_VPF, assign, c.cluster_id))

    def _subscribe(self, wf: int, c: ClusterRecord, peers=None) -> None:
        body = self._deploy_payload(wf, c, VpcRole.ACTIVE, peers)
        for icps in self.icps:
            self.send(icps, self._msg(MsgType.DEPLOY_VPC, body, c.cluster_id))

    def _release(self, wf: int, c: ClusterRecord, irs: Optional[Sequence[int]] = None) -> None:
        body = p.ReleaseClusterPayload(wf, c.cluster_id).encode()
        targets = list(irs) if irs is not None else c.irs + [ir for _, ir in c.lost]
        for ir in dict.fromkeys(targets):
            self.send(ir, self._msg(MsgType.RELEASE_CLUSTER, body, c.cluster_id))
        if irs is None:
            for icps in self.icps:
                self.send(icps, self._msg(MsgType.RELEASE_CLUSTER, body, c.cluster_id))
            c.state = "released"
            self._deallocate(c.cluster_id, targets)

    def deploy_cluster(
        self,
        vpf: Tuple[int, int],
        size: int = 2,
        site: Optional[str] = None,
        rt_class: int = 2,
        sync_timeout_cycles: int = 2,
        ready_window: int = 5,
        sync_interval_ns: int = MS,
    ) -> int:
        """Deploy a fresh cluster (first member Active); returns its cluster_id."""
        desc = self.registry.get(*vpf)
        sites = [site] if site else [None]
        irs = self._place(size, sites, rt_class, set())
        site = site or self.irs[irs[0]].site
        c = self._new_cluster(
            irs, (desc,), site, rt_class=rt_class, sync_timeout_cycles=sync_timeout_cycles,
            ready_window=ready_window, sync_interval_ns=sync_interval_ns,
        )
        wf = self._alloc_wf()
        roles = [VpcRole.ACTIVE] + [VpcRole.INACTIVE] * (size - 1)
        self._initial[wf] = (c.cluster_id, set(c.nodes))
        self._send_deploy(wf, c, c.members, roles)
        return c.cluster_id

    def _alloc_wf(self) -> int:
        wf = self._next_wf
        self._next_wf += 1
        return wf

    def live_cluster(self, cluster_id: int) -> ClusterRecord:
        """Follow the successor chain from a (possibly replaced) cluster id."""
        c = self.clusters[cluster_id]
        while c.successor:
            c = self.clusters[c.successor]
        return c

    # -- workflows -----------------------------------------------------
    def reconfigure(self, cluster_id: int, new_vpf: Tuple[int, int], requester: int = 0) -> WorkflowRecord:
        return self._submit(cluster_id, WorkflowKind.RECONFIGURE, new_vpf, None, requester)

    def redeploy(self, cluster_id: int, target_site: str, requester: int = 0) -> WorkflowRecord:
        return self._submit(cluster_id, WorkflowKind.REDEPLOY, None, target_site, requester)

    def restore_redundancy(self, cluster_id: int, requester: int = 0) -> WorkflowRecord:
        return self._submit(cluster_id, WorkflowKind.RESTORE_REDUNDANCY, None, None, requester)

    def _submit(self, cluster_id, kind, vpf, site, requester) -> WorkflowRecord:
        rec = WorkflowRecord(self._alloc_wf(), kind, old_cluster=cluster_id)
        self.workflows[rec.workflow_id] = rec
        self.log.append(rec)
        root = self.clusters.get(cluster_id)
        if root is None:
            self._fail_early(rec, f"unknown cluster {cluster_id}")
            return rec
        live = self.live_cluster(cluster_id)
        if live.cluster_id in self.busy:
            self.queue.setdefault(live.cluster_id, []).append((self._start, (rec, vpf, site, requester)))
            return rec
        self._start(rec, vpf, site, requester)
        return rec

    def _fail_early(self, rec: WorkflowRecord, detail: str) -> None:
        rec.advance(Phase.FAILED, detail)
        self.log.append(rec)
        log.warning("workflow %d failed: %s", rec.workflow_id, detail)
        for hook in list(self.phase_hooks):
            hook(rec)

    def _start(self, rec: WorkflowRecord, vpf, site, requester) -> None:
        old = self.live_cluster(rec.old_cluster)
        rec.old_cluster = old.cluster_id
        if old.state != "live":
            self._fail_early(rec, f"cluster {old.cluster_id} not live")
            return self._dequeue(old.cluster_id)
        if rec.kind == WorkflowKind.RESTORE_REDUNDANCY:
            return self._start_restore(rec, old, requester)
        if not old.members:
            self._fail_early(rec, f"cluster {old.cluster_id} has no live members")
            return self._dequeue(old.cluster_id)
        try:
            if rec.kind == WorkflowKind.RECONFIGURE:
                vpfs = (self.registry.get(*vpf),)
                sites = [old.site, None]
            else:
                vpfs = old.vpfs
                sites = [site]
            exclude = set(old.irs) | {ir for _, ir in old.lost}
            # full configured size, so a workflow also replaces lost members
            irs = self._place(old.size, sites, old.rt_class, exclude)
        except (VpfNotFound, PlacementError) as exc:
            self._fail_early(rec, str(exc))
            return self._dequeue(old.cluster_id)
        new = self._new_cluster(irs, vpfs, self.irs[irs[0]].site, template=old)
        new.size = old.size
        new.state = "shadow"
        rec.new_cluster = new.cluster_id
        run = _Run(rec, new, old, set(new.nodes), requester, leader=new.leader)
        self.runs[rec.workflow_id] = run
        self.busy[old.cluster_id] = rec.workflow_id
        self.busy[new.cluster_id] = rec.workflow_id
        self._publish(run)
        self._send_deploy(
            rec.workflow_id, new, new.members, [VpcRole.SHADOW] * len(new.members), sources=old.nodes
        )
        self._later(run, self.cfg.readiness_timeout_ns, self._readiness_timeout, run)

    def _start_restore(self, rec: WorkflowRecord, c: ClusterRecord, requester: int) -> None:
        missing = c.size - len(c.members)
        if missing <= 0:
            rec.new_cluster = c.cluster_id
            rec.advance(Phase.COMMITTED, "already complete")
            self.log.append(rec)
            return self._dequeue(c.cluster_id)
        rec.new_cluster = c.cluster_id
        exclude = set(c.irs) | {ir for _, ir in c.lost}
        try:
            ir = self._place(1, [c.site, None], c.rt_class, exclude)[0]
        except PlacementError as exc:
            self._fail_early(rec, str(exc))
            self._schedule_restore_retry(c.cluster_id)
            return self._dequeue(c.cluster_id)
        node = self._next_node
        self._next_node += 1
        joiner = (node, ir)
        run = _Run(rec, c, None, {node}, requester, leader=node, joiner=joiner)
        self.runs[rec.workflow_id] = run
        self.busy[c.cluster_id] = rec.workflow_id
        self.irs[ir].allocated.append(c.cluster_id)
        self._publish(run)
        peers = list(c.members) + [joiner]
        self._send_deploy(
            rec.workflow_id, c, [joiner], [VpcRole.SHADOW], peers=peers, sources=c.nodes, flags=p.FLAG_JOIN
        )
        self._later(run, self.cfg.readiness_timeout_ns, self._readiness_timeout, run)

    def _schedule_restore_retry(self, cluster_id: int) -> None:
        n = self.restore_attempts.get(cluster_id, 0) + 1
        self.restore_attempts[cluster_id] = n
        if n < self.cfg.restore_attempts:
            self.ctx.call_later(self.cfg.restore_backoff_ns, self._retry_restore, cluster_id)
        else:
            log.error("cluster %d: giving up restoring redundancy after %d attempts", cluster_id, n)

    def _retry_restore(self, cluster_id: int) -> None:
        c = self.live_cluster(cluster_id)
        if c.state == "live" and len(c.members) < c.size:
            self.restore_redundancy(c.cluster_id)

    def _finish(self, run: _Run) -> None:
        for h in run.timers:
            h.cancel()
        run.timers.clear()
        self.runs.pop(run.rec.workflow_id, None)
        freed = [cid for cid, wf in self.busy.items() if wf == run.rec.workflow_id]
        for cid in freed:
            del self.busy[cid]
        for cid in freed:
            self._dequeue(cid)

    def _dequeue(self, cluster_id: int) -> None:
        q = self.queue.pop(cluster_id, [])
        if not q:
            return
        target = self.live_cluster(cluster_id).cluster_id
        if target != cluster_id:
            self.queue.setdefault(target, []).extend(q)
            cluster_id = target
            q = self.queue.pop(target)
        fn, args = q[0]
        if q[1:]:
            self.queue[cluster_id] = q[1:]
        fn(*args)

    def _fail(self, run: _Run, detail: str) -> None:
        if run.rec.done:
            return
        self._set_phase(run, Phase.FAILED, detail)
        if run.rec.kind == WorkflowKind.RESTORE_REDUNDANCY:
            joiner = run.joiner
            self._release(run.rec.workflow_id, run.new, irs=[joiner[1]])
            self._deallocate(run.new.cluster_id, [joiner[1]])
            self._subscribe(run.rec.workflow_id, run.new)
            self._schedule_restore_retry(run.new.cluster_id)
        else:
            self._release(run.rec.workflow_id, run.new)
        self._finish(run)

    def _readiness_timeout(self, run: _Run) -> None:
        if run.rec.phase < Phase.READY:
            self._fail(run, "readiness timeout")

    # -- message handling --------------------------------------------------
    def on_message(self, msg: WireMessage, sender: int) -> None:
        t = msg.msg_type
        if t == MsgType.WORKFLOW_STATUS:
            self._on_status(msg, p.WorkflowStatusPayload.decode(msg.payload))
        elif t == MsgType.READY_TO_TAKEOVER:
            self._on_ready(msg, p.decode_u32(msg.payload))
        elif t == MsgType.HANDOVER_ACK:
            self._on_handover_ack(msg, p.HandoverAckPayload.decode(msg.payload))
        elif t == MsgType.IR_REGISTER:
            reg = p.IrRegisterPayload.decode(msg.payload)
            try:
                self.register_ir(InfrastructureResource(reg.ir_id, reg.caps))
                detail = f"registered:{reg.ir_id}"
            except DuplicateIr:
                detail = f"rejected:{reg.ir_id}"
            body = p.WorkflowStatusPayload(0, 0, detail).encode()
            self.send(sender, self._msg(MsgType.WORKFLOW_STATUS, body))
        elif t == MsgType.IR_CAPABILITY_QUERY:
            ir_id = p.decode_u32(msg.payload)
            res = self.irs.get(ir_id)
            reg = p.IrRegisterPayload(ir_id, res.capabilities) if res else None
            self.send(sender, self._msg(MsgType.IR_CAPABILITY_REPLY, p.encode_capability_reply(reg, ir_id)))
        elif t == MsgType.RECONFIGURE_REQUEST:
            req = p.ReconfigureRequestPayload.decode(msg.payload)
            self.reconfigure(req.cluster_id, (req.vpf_id, req.version), requester=sender)
        elif t == MsgType.REDEPLOY_REQUEST:
            req = p.RedeployRequestPayload.decode(msg.payload)
            self.redeploy(req.cluster_id, req.site, requester=sender)

    def _on_status(self, msg: WireMessage, st: p.WorkflowStatusPayload) -> None:
        name, arg = st.event()
        self.events.append((self.now(), name, msg.cluster_id, st.detail))
        if name == "deployed":
            self._on_deployed(st.workflow_id, arg, msg.cluster_id)
        elif name == "transmitting":
            self._on_transmitting(msg)
        elif name in ("takeover", "member-lost"):
            self._on_member_lost(msg.cluster_id, arg, msg.src if name == "takeover" else None)
        elif name == "divergence":
            log.warning("cluster %d: state divergence repaired at seq %s on node %d", msg.cluster_id, arg, msg.src)

    def _on_deployed(self, wf: int, node: Optional[int], cluster_id: int) -> None:
        init = self._initial.get(wf)
        if init is not None:
            cid, waiting = init
            waiting.discard(node)
            if not waiting:
                del self._initial[wf]
                c = self.clusters[cid]
                c.state = "live"
                self._subscribe(wf, c)
            return
        run = self.runs.get(wf)
        if run is None or node not in run.pending_deploy:
            return
        run.pending_deploy.discard(node)
        if run.pending_deploy:
            return
        if run.rec.kind == WorkflowKind.RESTORE_REDUNDANCY:
            self._subscribe(wf, run.new, peers=list(run.new.members) + [run.joiner])
        else:
            self._subscribe(wf, run.new)
        self._set_phase(run, Phase.SYNCING)

    def _run_for_cluster(self, cluster_id: int) -> Optional[_Run]:
        wf = self.busy.get(cluster_id)
        return self.runs.get(wf) if wf is not None else None

    def _on_ready(self, msg: WireMessage, seq: int) -> None:
        run = self._run_for_cluster(msg.cluster_id)
        if run is None or run.rec.phase != Phase.SYNCING or msg.src != run.leader:
            return
        if run.rec.kind == WorkflowKind.RESTORE_REDUNDANCY:
            return self._commit_restore(run)
        self._set_phase(run, Phase.READY)
        run.rec.boundary_seq = seq + self.cfg.boundary_margin
        self._set_phase(run, Phase.HANDOVER_ISSUED, f"boundary:{run.rec.boundary_seq}")
        interval = run.new.sync_interval_ns
        self._later(run, self.cfg.ack_timeout_cycles * interval, self._ack_timeout, run)
        self._later(run, self.cfg.commit_timeout_ns, self._commit_timeout, run)
        self._retransmit(run)

    def _handover_cmd(self, run: _Run, c: ClusterRecord, flags: int = 0) -> WireMessage:
        body = p.HandoverCmdPayload(run.rec.boundary_seq, run.new.cluster_id).encode()
        return self._msg(MsgType.HANDOVER_CMD, body, c.cluster_id, flags)

    def _maybe_confirm(self, run: _Run) -> None:
        """Release the new leader's transmit right once the old leader is bound."""
        if run.confirmed or run.old is None or run.old.leader not in run.old_acked:
            return
        run.confirmed = True
        for node in run.new.nodes:
            self.send(node, self._handover_cmd(run, run.new, p.FLAG_CONFIRM))

    def _retransmit(self, run: _Run) -> None:
        if run.rec.done:
            return
        for node in run.new.nodes:
            if run.confirmed:
                self.send(node, self._handover_cmd(run, run.new, p.FLAG_CONFIRM))
            elif node not in run.new_acked:
                self.send(node, self._handover_cmd(run, run.new))
        if run.old_cmd_sent:
            for node in run.old.nodes:
                if node not in run.old_acked:
                    self.send(node, self._handover_cmd(run, run.old))
        pending = set(run.new.nodes) - run.new_acked
        if run.old_cmd_sent:
            pending |= set(run.old.nodes) - run.old_acked
        # confirmations repeat until the new leader reports transmitting
        if pending or run.confirmed:
            self._later(run, run.new.sync_interval_ns, self._retransmit, run)

    def _on_handover_ack(self, msg: WireMessage, ack: p.HandoverAckPayload) -> None:
        run = self._run_for_cluster(msg.cluster_id)
        if run is None or run.rec.phase != Phase.HANDOVER_ISSUED or ack.boundary_seq != run.rec.boundary_seq:
            return
        on_new = msg.cluster_id == run.new.cluster_id
        if not ack.ok:
            if not run.confirmed:
                # nobody may transmit from this boundary yet: move it past the reporter
                self._rebase(run, ack.last_processed_seq)
            else:
                log.warning("workflow %d: node %d rejected boundary %d", run.rec.workflow_id, msg.src, ack.boundary_seq)
            return
        if on_new:
            run.new_acked.add(msg.src)
            if msg.src == run.leader and not run.old_cmd_sent:
                run.old_cmd_sent = True
                for node in run.old.nodes:
                    self.send(node, self._handover_cmd(run, run.old))
        else:
            run.old_acked.add(msg.src)
            self._maybe_confirm(run)

    def _rebase(self, run: _Run, seen_seq: int) -> None:
        boundary = seen_seq + self.cfg.boundary_margin
        log.info("workflow %d: boundary %d already passed, moving to %d", run.rec.workflow_id, run.rec.boundary_seq, boundary)
        run.rec.boundary_seq = boundary
        run.new_acked.clear()
        run.old_acked.clear()
        run.old_cmd_sent = False
        run.boundary_gen += 1
        self.log.append(run.rec)
        for node in run.new.nodes:
            self.send(node, self._handover_cmd(run, run.new))
        interval = run.new.sync_interval_ns
        self._later(run, self.cfg.ack_timeout_cycles * interval, self._ack_timeout, run, run.boundary_gen)

    def _ack_timeout(self, run: _Run, gen: int = 0) -> None:
        if gen != run.boundary_gen:
            return
        if run.rec.phase == Phase.HANDOVER_ISSUED and not run.old_cmd_sent:
            self._fail(run, "handover ack timeout")

    def _commit_timeout(self, run: _Run) -> None:
        if run.rec.phase == Phase.HANDOVER_ISSUED:
            self._fail(run, "new cluster never transmitted")

    def _on_transmitting(self, msg: WireMessage) -> None:
        run = self._run_for_cluster(msg.cluster_id)
        if run is None or run.rec.kind == WorkflowKind.RESTORE_REDUNDANCY or run.rec.done:
            return
        if msg.cluster_id != run.new.cluster_id:
            return
        new, old = run.new, run.old
        if new.leader != msg.src:
            self._promote_member(new, msg.src)
        self._set_phase(run, Phase.COMMITTED, f"boundary:{run.rec.boundary_seq}")
        new.state = "live"
        old.successor = new.cluster_id
        self._release(run.rec.workflow_id, old)
        self._set_phase(run, Phase.RELEASED)
        self._finish(run)
        if len(new.members) < new.size:
            self.restore_redundancy(new.cluster_id)

    def _promote_member(self, c: ClusterRecord, node: int) -> None:
        for i, (n, ir) in enumerate(c.members):
            if n == node:
                c.members.insert(0, c.members.pop(i))
                return

    def _commit_restore(self, run: _Run) -> None:
        c = run.new
        joiner = run.joiner
        self._set_phase(run, Phase.READY)
        c.members.append(joiner)
        wf = run.rec.workflow_id
        for node in c.nodes:
            body = self._deploy_payload(wf, c, VpcRole.INACTIVE)
            self.send(node, self._msg(MsgType.DEPLOY_VPC, body, c.cluster_id))
        self._subscribe(wf, c)
        self.restore_attempts.pop(c.cluster_id, None)
        self._set_phase(run, Phase.COMMITTED, f"joined:{joiner[0]}")
        self._finish(run)
        if len(c.members) < c.size:
            self.restore_redundancy(c.cluster_id)

    def _on_member_lost(self, cluster_id: int, node: Optional[int], new_leader: Optional[int]) -> None:
        c = self.clusters.get(cluster_id)
        if c is None or node is None:
            return
        entry = next(((n, ir) for n, ir in c.members if n == node), None)
        if new_leader is not None:
            self._promote_member(c, new_leader)
            run = self._run_for_cluster(cluster_id)
            if run is not None and run.new is c and run.leader == node:
                run.leader = new_leader
            if run is not None and run.old is c and run.rec.phase == Phase.HANDOVER_ISSUED:
                self._maybe_confirm(run)
        if entry is None:
            return
        c.members.remove(entry)
        c.lost.add(entry)
        # fence: a member declared lost may only be slow, so stop it for good
        self._release(0, c, irs=[entry[1]])
        self._deallocate(cluster_id, [entry[1]])
        log.info("cluster %d lost member %d", cluster_id, node)
        if c.state == "live" and c.members:
            for n in c.nodes:
                body = self._deploy_payload(0, c, VpcRole.INACTIVE)
                self.send(n, self._msg(MsgType.DEPLOY_VPC, body, c.cluster_id))
            self._subscribe(0, c)
        if c.state == "live":
            self.restore_redundancy(cluster_id)
