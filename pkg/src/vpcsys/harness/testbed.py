"""Single-host topology run on the deterministic in-process channel.

Node ids follow the testbed layout: the ICPS, orchestrator, registry and
grandmaster have fixed ids, IR hosts live in two halls, and VPC instances
are numbered from 100 as they are deployed.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from ..domain import MS, US, MsgType, VpcRole
from ..icps_sim import IcpsActor, IcpsConfig
from ..protocol import IrCapabilities
from ..registry_service import RegistryService
from ..runtime import SimRuntime
from ..transport.inproc import EventLoop, FaultPlan, InProcessNetwork, LatencyModel
from ..vpc_runtime import IrAgent, VpcActor, VpcInstance
from ..vpcmo import ClusterRecord, Vpcmo, VpcmoConfig
from ..vpf import VpfDescriptor, VpfKind, VpfRegistry

log = logging.getLogger(__name__)

ICPS = 1
VPCMO = 2
REGISTRY = 3
GRANDMASTER = 4
HARNESS = 5
FIRST_VPC = 100

IR_SITES: Dict[int, str] = {10: "hall-A", 11: "hall-A", 12: "hall-A", 13: "hall-A", 20: "hall-B", 21: "hall-B"}

INVERT = (1, 1)
IDENTITY = (1, 2)
VPF_CATALOG = {
    INVERT: VpfDescriptor.make(1, 1, VpfKind.INVERT),
    IDENTITY: VpfDescriptor.make(1, 2, VpfKind.IDENTITY),
}

#: one-way link delay of the simulated switch
LINK_BASE_NS = 160 * US
LINK_JITTER_NS = 40 * US
SETUP_NS = 50 * MS


def default_registry(path: Optional[str] = None) -> VpfRegistry:
    reg = VpfRegistry(path)
    for d in VPF_CATALOG.values():
        reg.put(d)
    return reg


def kind_name(vpf: Tuple[int, int]) -> str:
    return VpfKind(VPF_CATALOG[vpf].kind).name.lower()


@dataclass
class SimSetup:
    samples: int = 10_000
    interval_ns: int = MS
    timeout_cycles: int = 2
    backups: int = 1
    ready_window: int = 5
    site: str = "hall-A"
    vpf: Tuple[int, int] = INVERT
    seed: int = 0
    ir_sites: Dict[int, str] = field(default_factory=lambda: dict(IR_SITES))
    vpcmo: VpcmoConfig = field(default_factory=VpcmoConfig)
    log_path: Optional[str] = None


class SimTestbed:
    def __init__(
        self,
        setup: SimSetup,
        faults: Optional[FaultPlan] = None,
        latency: Optional[LatencyModel] = None,
    ) -> None:
        self.setup = setup
        self.loop = EventLoop()
        self.faults = faults or FaultPlan()
        self.net = InProcessNetwork(
            self.loop, latency or LatencyModel(LINK_BASE_NS, LINK_JITTER_NS, setup.seed), self.faults
        )
        self.net.declare(*range(FIRST_VPC, FIRST_VPC + 1000))
        self.rt = SimRuntime(self.net)
        self.outputs: Counter = Counter()
        self.net.taps.append(self._tap)

        self.registry = default_registry()
        self.rt.add(RegistryService(REGISTRY, self.registry))
        self.vpcmo = Vpcmo(VPCMO, self.registry, icps=[ICPS], config=setup.vpcmo, log_path=setup.log_path)
        self.rt.add(self.vpcmo)
        self.icps = IcpsActor(
            IcpsConfig(ICPS, setup.interval_ns, setup.samples, start_ns=SETUP_NS)
        )
        self.rt.add(self.icps)
        self.irs: Dict[int, IrAgent] = {}
        for ir, site in sorted(setup.ir_sites.items()):
            agent = IrAgent(ir, IrCapabilities(site=site), vpcmo=VPCMO, register=True)
            self.irs[ir] = agent
            self.rt.add(agent)
        self.loop.run_until(MS)
        self.origin = self.vpcmo.deploy_cluster(
            setup.vpf,
            size=1 + setup.backups,
            site=setup.site,
            sync_timeout_cycles=setup.timeout_cycles,
            ready_window=setup.ready_window,
            sync_interval_ns=setup.interval_ns,
        )
        self.loop.run_until(SETUP_NS - setup.interval_ns)
        if self.cluster.state != "live" or not self.icps.targets():
            raise RuntimeError("initial cluster failed to deploy")

    def _tap(self, src: int, dest: int, msg) -> None:
        if msg.msg_type == MsgType.ACTUATOR_OUTPUT:
            self.outputs[msg.seq] += 1

    # -- inspection ----------------------------------------------------
    @property
    def cluster(self) -> ClusterRecord:
        return self.vpcmo.live_cluster(self.origin)

    def instance(self, node: int) -> VpcInstance:
        actor = self.rt.actors[node]
        assert isinstance(actor, VpcActor)
        return actor.instance

    def instances(self) -> List[VpcInstance]:
        return [a.instance for a in self.rt.actors.values() if isinstance(a, VpcActor)]

    def live_instances(self) -> List[VpcInstance]:
        return [i for i in self.instances() if self.rt.alive(i.node) and i.role != VpcRole.RELEASED]

    def transmitting(self) -> List[int]:
        """Live instances currently holding transmit right (Active role)."""
        return [i.node for i in self.live_instances() if i.role == VpcRole.ACTIVE]

    def active_node(self) -> int:
        return self.cluster.leader

    # -- actions -------------------------------------------------------
    def crash(self, node: int) -> None:
        log.info("t=%d: crashing node %d", self.loop.now, node)
        self.rt.crash(node)

    def kill_active(self) -> int:
        node = self.active_node()
        self.crash(node)
        return node

    def at_seq(self, seq: int, fn) -> None:
        """Run fn just before the ICPS emits seq."""

        def hook(s: int) -> None:
            if s == seq:
                fn()

        self.icps.before_send.append(hook)

    def run(self) -> bool:
        limit = SETUP_NS + (self.setup.samples + 5) * self.setup.interval_ns
        self.loop.run_while(lambda: not self.icps.finished, limit)
        return self.icps.finished

    def run_for(self, ns: int) -> None:
        self.loop.run_until(self.loop.now + ns)
