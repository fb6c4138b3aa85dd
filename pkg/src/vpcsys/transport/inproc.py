"""Deterministic in-process channel driven by a virtual-time event loop.

Every message is delivered through the loop's heap, so a run with the same
seed, topology and fault plan replays bit-for-bit.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, List, Optional, Set, Tuple

from ..domain import MessageLayer
from .errors import EndpointClosed, UnknownPeer
from .wire import WireMessage

log = logging.getLogger(__name__)


class Timer:
    __slots__ = ("when", "fn", "args", "cancelled")

    def __init__(self, when: int, fn: Callable, args: tuple) -> None:
        self.when = when
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    """Single-threaded discrete-event scheduler over integer nanoseconds."""

    def __init__(self, start: int = 0) -> None:
        self.now = start
        self._heap: List[Tuple[int, int, Timer]] = []
        self._counter = itertools.count()

    def call_at(self, when: int, fn: Callable, *args) -> Timer:
        if when < self.now:
            when = self.now
        t = Timer(when, fn, args)
        heapq.heappush(self._heap, (when, next(self._counter), t))
        return t

    def call_later(self, delay: int, fn: Callable, *args) -> Timer:
        return self.call_at(self.now + max(0, delay), fn, *args)

    def pending(self) -> int:
        return len(self._heap)

    def next_time(self) -> Optional[int]:
        while self._heap and self._heap[0][2].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        while self._heap:
            when, _, t = heapq.heappop(self._heap)
            if t.cancelled:
                continue
            self.now = when
            t.fn(*t.args)
            return True
        return False

    def run_until(self, when: int) -> None:
        while True:
            nxt = self.next_time()
            if nxt is None or nxt > when:
                break
            self.step()
        self.now = max(self.now, when)

    def run_while(self, predicate: Callable[[], bool], limit: Optional[int] = None) -> bool:
        """Step while predicate() holds; False if the loop ran dry or hit limit."""
        while predicate():
            nxt = self.next_time()
            if nxt is None or (limit is not None and nxt > limit):
                if limit is not None:
                    self.now = max(self.now, limit)
                return False
            self.step()
        return True


@dataclass
class FaultPlan:
    """Drops, added delay and partitions for non-management traffic."""

    drop_filter: Optional[Callable[[int, int, int], bool]] = None
    delay_ns: int = 0
    partition: Set[FrozenSet[int]] = field(default_factory=set)

    def partitioned(self, a: int, b: int) -> bool:
        return frozenset((a, b)) in self.partition

    def drops(self, msg: WireMessage) -> bool:
        return self.drop_filter is not None and bool(
            self.drop_filter(msg.src, msg.msg_type, msg.seq)
        )

    @property
    def empty(self) -> bool:
        return self.drop_filter is None and not self.delay_ns and not self.partition


@dataclass
class LatencyModel:
    """One-way delay = base + uniform integer jitter in [0, jitter]."""

    base_ns: int = 0
    jitter_ns: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        self._rng = random.Random(self.seed)

    def sample(self) -> int:
        if self.jitter_ns <= 0:
            return self.base_ns
        return self.base_ns + self._rng.randint(0, self.jitter_ns)


Tap = Callable[[int, int, WireMessage], None]


class InProcessNetwork:
    def __init__(
        self,
        loop: Optional[EventLoop] = None,
        latency: Optional[LatencyModel] = None,
        faults: Optional[FaultPlan] = None,
    ) -> None:
        self.loop = loop or EventLoop()
        self.latency = latency or LatencyModel()
        self.faults = faults or FaultPlan()
        self.endpoints: Dict[int, InProcessEndpoint] = {}
        self.known: Set[int] = set()
        self.crashed: Set[int] = set()
        self.taps: List[Tap] = []
        self.dropped = 0
        self._last_delivery: Dict[Tuple[int, int], int] = {}

    def declare(self, *nodes: int) -> None:
        """Add node ids to the peers table without opening endpoints."""
        self.known.update(nodes)

    def open(self, node: int) -> "InProcessEndpoint":
        if node in self.endpoints:
            raise ValueError(f"node {node} already bound")
        ep = InProcessEndpoint(self, node)
        self.endpoints[node] = ep
        self.known.add(node)
        self.crashed.discard(node)
        return ep

    def crash(self, node: int) -> None:
        self.crashed.add(node)

    def _send(self, src: int, dest: int, msg: WireMessage) -> None:
        if dest not in self.known:
            raise UnknownPeer(dest)
        if src in self.crashed:
            return
        for tap in self.taps:
            tap(src, dest, msg)
        reliable = msg.layer == MessageLayer.MANAGEMENT
        extra = 0
        if not reliable:
            f = self.faults
            if f.partitioned(src, dest) or f.drops(msg):
                self.dropped += 1
                return
            extra = f.delay_ns
        now = self.loop.now
        when = now + self.latency.sample() + extra
        key = (src, dest)
        # FIFO per ordered pair
        when = max(when, self._last_delivery.get(key, 0))
        self._last_delivery[key] = when
        self.loop.call_at(when, self._deliver, dest, msg)

    def _deliver(self, dest: int, msg: WireMessage) -> None:
        ep = self.endpoints.get(dest)
        if ep is None or ep.closed or dest in self.crashed:
            return
        ep._push(msg)


class InProcessEndpoint:
    kind = "inproc"

    def __init__(self, network: InProcessNetwork, node: int) -> None:
        self.network = network
        self.local = node
        self.closed = False
        self.on_message: Optional[Callable[[WireMessage, int], None]] = None
        self._inbox: deque = deque()

    def send(self, dest: int, msg: WireMessage) -> None:
        if self.closed:
            raise EndpointClosed(self.local)
        self.network._send(self.local, dest, msg)

    def _push(self, msg: WireMessage) -> None:
        if self.on_message is not None:
            self.on_message(msg, msg.src)
        else:
            self._inbox.append(msg)

    def receive(self, timeout_ns: Optional[int] = None) -> Tuple[WireMessage, int]:
        """Advance virtual time until a message arrives or the timeout lapses."""
        if self.closed:
            raise EndpointClosed(self.local)
        loop = self.network.loop
        deadline = None if timeout_ns is None else loop.now + timeout_ns
        loop.run_while(lambda: not self._inbox, deadline)
        if not self._inbox:
            raise TimeoutError(f"node {self.local}: receive timed out")
        msg = self._inbox.popleft()
        return msg, msg.src

    def close(self) -> None:
        self.closed = True
        self.network.endpoints.pop(self.local, None)
