"""Simulated ICPS: emits the alternating sensor bit on a fixed-rate schedule
and records one TraceRecord per sequence number."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from . import protocol as p
from .domain import MS, UNASSIGNED, CycleSample, MsgType
from .runtime import Actor, ActorDriver
from .transport import EndpointClosed, TransportError
from .transport.wire import WireMessage

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("seq", "t_send_ns", "t_recv_ns", "cycle_ns", "input", "output", "responder", "active_id", "missed")


@dataclass
class IcpsConfig:
    node: int = 1
    transfer_interval_ns: int = MS
    n_samples: int = 10_000
    response_deadline_ns: Optional[int] = None
    #: absolute time of seq 0; seq k is sent at start_ns + k * interval
    start_ns: Optional[int] = None
    #: hold the schedule until this many cluster members are subscribed
    min_subscribers: int = 0
    start_lead_ns: int = 20 * MS

    def __post_init__(self) -> None:
        if self.transfer_interval_ns <= 0:
            raise ValueError("transfer interval must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.response_deadline_ns is None:
            self.response_deadline_ns = self.transfer_interval_ns


@dataclass
class TraceRecord:
    seq: int
    t_send: int
    input_bit: int
    t_recv: int = 0
    output_bit: Optional[int] = None
    responder: int = UNASSIGNED
    active_id: int = UNASSIGNED
    missed: bool = False

    @property
    def cycle_time(self) -> int:
        return 0 if self.missed or self.output_bit is None else self.t_recv - self.t_send

    def sample(self) -> CycleSample:
        if self.missed:
            return CycleSample.missing(self.seq, self.t_send)
        return CycleSample(self.seq, self.t_send, self.t_recv, self.cycle_time, self.responder)

    def row(self) -> Tuple:
        return (
            self.seq, self.t_send, self.t_recv, self.cycle_time, self.input_bit,
            "" if self.output_bit is None else self.output_bit, self.responder, self.active_id, int(self.missed),
        )


def generate_signal(seq: int) -> int:
    return seq % 2


class IcpsActor(Actor):
    """Sender schedule and receiver in one event loop.

    Subscriptions arrive as DeployVpc (cluster peers) and are dropped on
    ReleaseCluster, so inputs reach every live and shadow cluster member.
    """

    def __init__(self, cfg: IcpsConfig, subscriptions: Optional[Dict[int, List[int]]] = None) -> None:
        self.cfg = cfg
        self.node_id = cfg.node
        self.subscriptions: Dict[int, List[int]] = dict(subscriptions or {})
        self.records: Dict[int, TraceRecord] = {}
        self.duplicates = 0
        self.late = 0
        self.next_seq = 1
        self.finished = False
        self.before_send: List[Callable[[int], None]] = []
        self.on_done: List[Callable[[], None]] = []
        self.on_start: List[Callable[[int], None]] = []
        self.started = False
        self._open: Dict[int, TraceRecord] = {}
        self._active = UNASSIGNED
        self._t0 = 0

    def targets(self) -> List[int]:
        seen: Dict[int, None] = {}
        for members in self.subscriptions.values():
            for n in members:
                seen[n] = None
        return list(seen)

    def start(self) -> None:
        if len(self.targets()) >= self.cfg.min_subscribers:
            self._begin()

    def _begin(self) -> None:
        iv = self.cfg.transfer_interval_ns
        if self.cfg.start_ns is None:
            lead = -(-self.cfg.start_lead_ns // iv) * iv
            self._t0 = (self.now() // iv + 1) * iv + lead
        else:
            self._t0 = self.cfg.start_ns
        self.started = True
        for cb in list(self.on_start):
            cb(self._t0)
        self.ctx.call_at(self._t0 + iv, self._send_next)

    def send_time(self, seq: int) -> int:
        return self._t0 + seq * self.cfg.transfer_interval_ns

    def _send_next(self) -> None:
        seq = self.next_seq
        for hook in list(self.before_send):
            hook(seq)
        bit = generate_signal(seq)
        now = self.now()
        rec = TraceRecord(seq, now, bit)
        self.records[seq] = rec
        self._open[seq] = rec
        msg = p.make(MsgType.SENSOR_INPUT, self.node_id, p.bit_payload(bit), seq=seq, timestamp_ns=now)
        for node in self.targets():
            try:
                self.send(node, msg)
            except (TransportError, OSError) as exc:
                log.warning("icps: send of seq %d to %d failed: %s", seq, node, exc)
        self.ctx.call_at(now + self.cfg.response_deadline_ns, self._expire, seq)
        self.next_seq += 1
        if seq < self.cfg.n_samples:
            self.ctx.call_at(self.send_time(seq + 1), self._send_next)

    def _expire(self, seq: int) -> None:
        rec = self._open.pop(seq, None)
        if rec is not None:
            rec.missed = True
            rec.active_id = self._active
        self._maybe_done(seq)

    def _maybe_done(self, seq: int) -> None:
        if seq == self.cfg.n_samples and not self._open and not self.finished:
            self.finished = True
            for cb in list(self.on_done):
                cb()

    def on_message(self, msg: WireMessage, sender: int) -> None:
        t = msg.msg_type
        if t == MsgType.ACTUATOR_OUTPUT:
            self._on_output(msg)
        elif t == MsgType.DEPLOY_VPC:
            d = p.DeployVpcPayload.decode(msg.payload)
            self.subscriptions[d.cluster_id] = d.member_ids
            if not self.started and len(self.targets()) >= self.cfg.min_subscribers:
                self._begin()
        elif t == MsgType.RELEASE_CLUSTER:
            r = p.ReleaseClusterPayload.decode(msg.payload)
            self.subscriptions.pop(r.cluster_id, None)

    def _on_output(self, msg: WireMessage) -> None:
        now = self.ctx.received_at()
        rec = self._open.get(msg.seq)
        if rec is None:
            done = self.records.get(msg.seq)
            if done is not None and not done.missed:
                self.duplicates += 1
            else:
                self.late += 1
            return
        try:
            bit = p.read_bit(msg)
        except p.PayloadError as exc:
            log.warning("icps: bad output for seq %d: %s", msg.seq, exc)
            return
        if now - rec.t_send > self.cfg.response_deadline_ns:
            return  # the expiry timer marks it
        del self._open[msg.seq]
        rec.t_recv = now
        rec.output_bit = bit
        rec.responder = msg.src
        rec.active_id = self._active = msg.src

    def trace(self) -> List[TraceRecord]:
        return [self.records[s] for s in sorted(self.records)]


def run_cycle_loop(
    cfg: IcpsConfig, endpoint, subscriptions: Optional[Dict[int, List[int]]] = None, clock=None
) -> List[TraceRecord]:
    """Drive an IcpsActor over a blocking endpoint until the last deadline.

    On endpoint failure the partial trace is returned.
    """
    actor = IcpsActor(cfg, subscriptions)
    driver = ActorDriver(actor, endpoint, clock=clock) if clock else ActorDriver(actor, endpoint)
    try:
        driver.run(until=lambda: actor.finished)
    except (EndpointClosed, TransportError, OSError) as exc:
        log.error("icps: endpoint failure, keeping %d records: %s", len(actor.records), exc)
    return actor.trace()


# -- CSV ------------------------------------------------------------------


class TraceFormatError(ValueError):
    pass


def write_trace(path: str, records: Iterable[TraceRecord], meta: Optional[Dict[str, str]] = None) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_trace(path: str) -> Tuple[List[TraceRecord], Dict[str, str]]:
    """Parse a trace CSV; returns the records and the ``# key=value`` preamble."""
    meta: Dict[str, str] = {}
    records: List[TraceRecord] = []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            k, sep, v = line[1:].strip().partition("=")
            if sep:
                meta[k.strip()] = v.strip()
            body_start = i + 1
        else:
            break
    rows = csv.reader(lines[body_start:])
    header = next(rows, None)
    if header is None or tuple(h.strip() for h in header) != TRACE_COLUMNS:
        raise TraceFormatError(f"row {body_start + 1}: expected header {','.join(TRACE_COLUMNS)}")
    for lineno, row in enumerate(rows, start=body_start + 2):
        if not row:
            continue
        if len(row) != len(TRACE_COLUMNS):
            raise TraceFormatError(f"row {lineno}: expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
        try:
            seq, t_send, t_recv, cycle, inp, out, responder, active, missed = row
            rec = TraceRecord(
                int(seq), int(t_send), int(inp), int(t_recv),
                None if out == "" else int(out), int(responder), int(active), missed.strip() == "1",
            )
        except ValueError as exc:
            raise TraceFormatError(f"row {lineno}: {exc}") from None
        if not rec.missed and rec.output_bit is None:
            raise TraceFormatError(f"row {lineno}: output missing on an answered sample")
        if not rec.missed and int(cycle) != rec.cycle_time:
            raise TraceFormatError(f"row {lineno}: cycle_ns {cycle} != t_recv_ns - t_send_ns")
        records.append(rec)
    return records, meta
