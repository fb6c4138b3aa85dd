"""Two-way time transfer against a grandmaster.

A stand-in for the testbed's hardware time sync: offsets are measured and
reported, never used to steer a clock.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, Optional, Sequence

from . import protocol as p
from .domain import MsgType, VpcError, nearest_rank
from .runtime import Actor, ActorDriver
from .transport.wire import WireMessage

log = logging.getLogger(__name__)


class NonCausalTimestamps(VpcError, ValueError):
    def __init__(self) -> None:
        super().__init__("non-causal timestamps")


class EmptyReport(VpcError, ValueError):
    pass


def _halve(x: int) -> int:
    """Integer division by two, rounding toward zero."""
    return x // 2 if x >= 0 else -((-x) // 2)


def estimate_offset(t1: int, t2: int, t3: int, t4: int) -> int:
    """Remote-minus-local clock offset from one probe exchange."""
    if t4 < t1 or t3 < t2:
        raise NonCausalTimestamps()
    return _halve((t2 - t1) + (t3 - t4))


@dataclass(frozen=True)
class ClockOffsetSample:
    probe_seq: int
    offset: int
    round_trip: int
    t_probe: int

    @classmethod
    def from_times(cls, seq: int, t1: int, t2: int, t3: int, t4: int) -> "ClockOffsetSample":
        return cls(seq, estimate_offset(t1, t2, t3, t4), (t4 - t1) - (t3 - t2), t1)


@dataclass(frozen=True)
class SyncConfig:
    sync_interval_ns: int = 31_250_000  # 2**-5 s
    window: int = 10_000

    def __post_init__(self) -> None:
        if self.sync_interval_ns <= 0:
            raise ValueError("sync interval must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")


class Grandmaster(Actor):
    """Answers each ClockProbe with (t1, t2, t3) on its own clock."""

    def __init__(self, node_id: int) -> None:
        self.node_id = node_id
        self.answered = 0

    def on_message(self, msg: WireMessage, sender: int) -> None:
        if msg.msg_type != MsgType.CLOCK_PROBE:
            return
        t2 = self.now()
        t1 = p.decode_probe(msg.payload)
        t3 = self.now()
        reply = p.make(
            MsgType.CLOCK_PROBE_REPLY, self.node_id, p.encode_probe_reply(t1, t2, t3), seq=msg.seq, timestamp_ns=t3
        )
        self.send(msg.src, reply)
        self.answered += 1


def run_grandmaster(endpoint, node_id: int, clock: Optional[Callable[[], int]] = None) -> None:
    """Serve probes until the endpoint closes."""
    gm = Grandmaster(node_id)
    driver = ActorDriver(gm, endpoint, clock=clock) if clock else ActorDriver(gm, endpoint)
    driver.run()


class ProbeClient(Actor):
    """Probes the grandmaster every sync interval and keeps the last window."""

    def __init__(
        self,
        node_id: int,
        grandmaster: int,
        config: SyncConfig = SyncConfig(),
        max_probes: Optional[int] = None,
    ) -> None:
        self.node_id = node_id
        self.grandmaster = grandmaster
        self.config = config
        self.max_probes = max_probes
        self.samples: Deque[ClockOffsetSample] = deque(maxlen=config.window)
        self.listeners: List[Callable[[ClockOffsetSample], None]] = []
        self._outstanding: Dict[int, int] = {}
        self._seq = 0

    def start(self) -> None:
        self.ctx.call_later(0, self._probe)

    @property
    def done(self) -> bool:
        return self.max_probes is not None and self._seq >= self.max_probes and not self._outstanding

    def _probe(self) -> None:
        if self.max_probes is not None and self._seq >= self.max_probes:
            return
        self._seq += 1
        t1 = self.now()
        self._outstanding[self._seq] = t1
        self.send(self.grandmaster, p.make(MsgType.CLOCK_PROBE, self.node_id, p.encode_probe(t1), seq=self._seq, timestamp_ns=t1))
        self.ctx.call_later(self.config.sync_interval_ns, self._probe)

    def on_message(self, msg: WireMessage, sender: int) -> None:
        if msg.msg_type != MsgType.CLOCK_PROBE_REPLY:
            return
        t4 = self.now()
        t1_sent = self._outstanding.pop(msg.seq, None)
        t1, t2, t3 = p.decode_probe_reply(msg.payload)
        if t1_sent is None or t1_sent != t1:
            return  # stale or foreign reply
        try:
            sample = ClockOffsetSample.from_times(msg.seq, t1, t2, t3, t4)
        except NonCausalTimestamps:
            log.warning("clock probe %d: non-causal timestamps", msg.seq)
            return
        self.samples.append(sample)
        for cb in list(self.listeners):
            cb(sample)


@dataclass(frozen=True)
class OffsetSummary:
    n: int
    max_abs: int
    median: int
    min: int
    max: int

    def format(self) -> str:
        return (
            f"clock offset over {self.n} probes: max |offset| {self.max_abs} ns, "
            f"median {self.median} ns, min {self.min} ns, max {self.max} ns"
        )


def sync_report(samples: Sequence[ClockOffsetSample]) -> OffsetSummary:
    if not samples:
        raise EmptyReport("no offset samples")
    offsets = sorted(s.offset for s in samples)
    return OffsetSummary(
        n=len(offsets),
        max_abs=max(abs(offsets[0]), abs(offsets[-1])),
        median=nearest_rank(offsets, 1, 2),
        min=offsets[0],
        max=offsets[-1],
    )
