"""Actor plumbing shared by the simulator and the socket runtime.

Roles (ICPS, VPC instances, IR agents, VPCMO, grandmaster) are written as
``Actor`` subclasses that only see a context: a clock, ``send`` and timers.
``SimRuntime`` runs them all on one virtual-time loop; ``ActorDriver`` runs
one actor against a blocking endpoint (real sockets, one thread each).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from typing import Callable, Dict, List, Optional

from .transport import ChannelKind, EndpointClosed, EndpointConfig, open_endpoint
from .transport.inproc import InProcessNetwork
from .transport.wire import WireMessage

log = logging.getLogger(__name__)


class Actor:
    node_id: int = 0
    ctx: "Context"

    def attach(self, ctx: "Context") -> None:
        self.ctx = ctx

    def start(self) -> None:
        pass

    def on_message(self, msg: WireMessage, sender: int) -> None:
        pass

    def stop(self) -> None:
        pass

    # helpers
    def now(self) -> int:
        return self.ctx.now()

    def send(self, dest: int, msg: WireMessage) -> None:
        self.ctx.send(dest, msg)

    def send_all(self, outgoing) -> None:
        for dest, msg in outgoing:
            self.ctx.send(dest, msg)


class Context:
    def now(self) -> int:
        raise NotImplementedError

    def send(self, dest: int, msg: WireMessage) -> None:
        raise NotImplementedError

    def call_later(self, delay_ns: int, fn: Callable, *args):
        raise NotImplementedError

    def call_at(self, when_ns: int, fn: Callable, *args):
        return self.call_later(when_ns - self.now(), fn, *args)

    def spawn(self, actor: Actor) -> None:
        raise NotImplementedError

    def received_at(self) -> int:
        """Arrival time of the message being handled; defaults to now."""
        return self.now()


# -- simulation ---------------------------------------------------------------


class SimContext(Context):
    def __init__(self, runtime: "SimRuntime", actor: Actor, endpoint, clock=None) -> None:
        self.runtime = runtime
        self.actor = actor
        self.endpoint = endpoint
        self.clock = clock
        self.dead = False
        endpoint.on_message = self._deliver

    def now(self) -> int:
        t = self.runtime.loop.now
        return self.clock(t) if self.clock else t

    def send(self, dest: int, msg: WireMessage) -> None:
        if not self.dead:
            self.endpoint.send(dest, msg)

    def call_later(self, delay_ns: int, fn: Callable, *args):
        return self.runtime.loop.call_later(delay_ns, self._fire, fn, args)

    def _fire(self, fn, args) -> None:
        if not self.dead:
            fn(*args)

    def _deliver(self, msg: WireMessage, sender: int) -> None:
        if not self.dead:
            self.actor.on_message(msg, sender)

    def spawn(self, actor: Actor) -> None:
        self.runtime.add(actor)


class SimRuntime:
    """All actors on one InProcessNetwork; deterministic for a given seed."""

    def __init__(self, network: Optional[InProcessNetwork] = None) -> None:
        self.network = network or InProcessNetwork()
        self.loop = self.network.loop
        self.actors: Dict[int, Actor] = {}
        self.contexts: Dict[int, SimContext] = {}
        self.children: Dict[int, List[int]] = {}
        self._doomed: set = set()

    def add(self, actor: Actor, clock: Optional[Callable[[int], int]] = None, parent: int = 0) -> Actor:
        ep = self.network.open(actor.node_id)
        ctx = SimContext(self, actor, ep, clock)
        self.actors[actor.node_id] = actor
        self.contexts[actor.node_id] = ctx
        if parent:
            self.children.setdefault(parent, []).append(actor.node_id)
        actor.attach(ctx)
        if actor.node_id in self._doomed:
            # crashed before it was spawned
            ctx.dead = True
            self.network.crash(actor.node_id)
            return actor
        actor.start()
        return actor

    def crash(self, node: int) -> None:
        """Crash-stop a node and everything it hosts."""
        ctx = self.contexts.get(node)
        if ctx is not None:
            ctx.dead = True
        else:
            self._doomed.add(node)
        self.network.crash(node)
        for child in getattr(self.actors.get(node), "hosted_nodes", lambda: [])():
            self.crash(child)

    def alive(self, node: int) -> bool:
        ctx = self.contexts.get(node)
        return ctx is not None and not ctx.dead

    def run_until(self, when: int) -> None:
        self.loop.run_until(when)

    def run_while(self, predicate: Callable[[], bool], limit: Optional[int] = None) -> bool:
        return self.loop.run_while(predicate, limit)


# -- blocking driver (sockets) -------------------------------------------


class ActorDriver(Context):
    """Run one actor over a blocking endpoint: timers plus receive(timeout)."""

    MAX_WAIT = 50_000_000

    def __init__(
        self,
        actor: Actor,
        endpoint,
        clock: Callable[[], int] = time.monotonic_ns,
        spawner: Optional[Callable[[Actor], None]] = None,
    ) -> None:
        self.actor = actor
        self.endpoint = endpoint
        self.clock = clock
        self.spawner = spawner
        self.running = False
        self._timers: list = []
        self._count = itertools.count()
        self._lock = threading.Lock()
        actor.attach(self)

    def now(self) -> int:
        return self.clock()

    def send(self, dest: int, msg: WireMessage) -> None:
        try:
            self.endpoint.send(dest, msg)
        except (ConnectionError, OSError) as exc:
            log.warning("node %d: send to %d failed: %s", self.actor.node_id, dest, exc)

    def call_later(self, delay_ns: int, fn: Callable, *args):
        entry = [self.clock() + max(0, delay_ns), next(self._count), fn, args, False]
        with self._lock:
            heapq.heappush(self._timers, entry)
        return _Handle(entry)

    def received_at(self) -> int:
        rx = getattr(self.endpoint, "last_rx_ns", 0)
        return rx if rx and self.clock is time.monotonic_ns else self.clock()

    def spawn(self, actor: Actor) -> None:
        if self.spawner is None:
            raise RuntimeError("this driver cannot host further actors")
        self.spawner(actor)

    def _next_due(self) -> Optional[int]:
        with self._lock:
            while self._timers and self._timers[0][4]:
                heapq.heappop(self._timers)
            return self._timers[0][0] if self._timers else None

    def _run_due(self) -> None:
        while True:
            with self._lock:
                while self._timers and self._timers[0][4]:
                    heapq.heappop(self._timers)
                if not self._timers or self._timers[0][0] > self.clock():
                    return
                _, _, fn, args, _ = heapq.heappop(self._timers)
            fn(*args)

    #: upper bound on messages handled before due timers get a turn
    DRAIN_LIMIT = 64

    def run(self, until: Optional[Callable[[], bool]] = None) -> None:
        self.running = True
        self.actor.start()
        while self.running and not (until and until()):
            nxt = self._next_due()
            now = self.clock()
            if nxt is not None and nxt <= now:
                # messages that arrived before the timer fired are handled first
                if not self._drain():
                    break
                self._run_due()
                continue
            wait = self.MAX_WAIT if nxt is None else min(self.MAX_WAIT, nxt - now)
            try:
                msg, sender = self.endpoint.receive(wait)
            except TimeoutError:
                continue
            except EndpointClosed:
                break
            self._dispatch(msg, sender)
        self.actor.stop()

    def _drain(self) -> bool:
        for _ in range(self.DRAIN_LIMIT):
            try:
                msg, sender = self.endpoint.receive(0)
            except TimeoutError:
                return True
            except EndpointClosed:
                return False
            self._dispatch(msg, sender)
        return True

    def _dispatch(self, msg: WireMessage, sender: int) -> None:
        try:
            self.actor.on_message(msg, sender)
        except Exception:
            log.exception("node %d: handler failed for %s", self.actor.node_id, msg.describe())

    def stop(self) -> None:
        self.running = False


class _Handle:
    def __init__(self, entry: list) -> None:
        self._entry = entry

    def cancel(self) -> None:
        self._entry[4] = True


class ThreadedRuntime:
    """Socket runtime: each actor gets its own endpoint and thread."""

    def __init__(self, kind: ChannelKind, config: EndpointConfig) -> None:
        self.kind = ChannelKind(kind)
        self.config = config
        self.drivers: Dict[int, ActorDriver] = {}
        self.threads: Dict[int, threading.Thread] = {}

    def add(self, actor: Actor) -> Actor:
        ep = open_endpoint(self.kind, actor.node_id, self.config)
        driver = ActorDriver(actor, ep, spawner=self.add)
        self.drivers[actor.node_id] = driver
        t = threading.Thread(target=driver.run, name=f"actor-{actor.node_id}", daemon=True)
        self.threads[actor.node_id] = t
        t.start()
        return actor

    def stop(self) -> None:
        for d in list(self.drivers.values()):
            d.stop()
        for t in list(self.threads.values()):
            t.join(timeout=1.0)
        for d in list(self.drivers.values()):
            d.endpoint.close()
