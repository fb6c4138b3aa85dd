"""The named test cases, run end to end on a chosen channel."""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from ..domain import MS, MsgType, SEC, VpcRole
from ..icps_sim import write_trace
from ..transport import ChannelKind
from ..transport.inproc import FaultPlan
from ..vpcmo import Phase, WorkflowKind, WorkflowRecord
from ..vpf import VpfState, apply_vpf
from .report import TestReport, evaluate, format_schedule, published_comparison
from .testbed import IDENTITY, INVERT, SimSetup, SimTestbed, kind_name

log = logging.getLogger(__name__)


class TestCase(enum.Enum):
    NORMAL = "normal"
    REPLACEMENT = "replacement"
    RECONFIGURATION = "reconfiguration"
    REDEPLOYMENT = "redeployment"

    __test__ = False


class ChannelUnavailable(RuntimeError):
    pass


@dataclass
class TestParams:
    samples: int = 10_000
    interval_ns: int = MS
    channel: ChannelKind = ChannelKind.IN_PROCESS
    timeout_cycles: int = 2
    backups: int = 1
    reconfigs: int = 3
    kill_at: int = 5_000
    second_kill_at: Optional[int] = None
    redeploy_site: str = "hall-B"
    seed: int = 0
    out_dir: Optional[str] = None

    __test__ = False

    def validate(self, case: TestCase) -> None:
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.interval_ns <= 0:
            raise ValueError("interval must be positive")
        if case == TestCase.REPLACEMENT:
            if self.backups < 1:
                raise ValueError("replacement needs backups >= 1")
            if not 1 <= self.kill_at <= self.samples:
                raise ValueError("kill_at must lie within the run")
        if case == TestCase.RECONFIGURATION and self.reconfigs < 1:
            raise ValueError("reconfiguration needs reconfigs >= 1")

    def meta(self, case: TestCase) -> Dict[str, str]:
        return {
            "case": case.value,
            "samples": str(self.samples),
            "interval_ns": str(self.interval_ns),
            "channel": ChannelKind(self.channel).value,
            "timeout_cycles": str(self.timeout_cycles),
            "backups": str(self.backups),
            "reconfigs": str(self.reconfigs),
            "kill_at": str(self.kill_at),
            "seed": str(self.seed),
        }


def reconfig_points(samples: int, count: int) -> List[int]:
    """Evenly spaced trigger seqs."""
    return [samples * i // (count + 1) for i in range(1, count + 1)]


def alternating_vpfs(count: int) -> List[Tuple[int, int]]:
    return [IDENTITY if i % 2 == 0 else INVERT for i in range(count)]


def replay_state(inst, upto: int) -> List[VpfState]:
    """Replay oracle: states after feeding seqs 1..upto through the chain."""
    states = [VpfState() for _ in inst.slots]
    for seq in range(1, upto + 1):
        value = seq % 2
        for i, slot in enumerate(inst.slots):
            value, states[i] = apply_vpf(slot.desc, states[i], value)
    return states


@dataclass
class SimRun:
    testbed: SimTestbed
    workflows: List[Tuple[WorkflowRecord, Tuple[int, int]]] = field(default_factory=list)
    kills: List[int] = field(default_factory=list)
    phase_log: List[Tuple[int, int, WorkflowKind, Phase]] = field(default_factory=list)
    takeovers: List[int] = field(default_factory=list)


def _sim_setup(params: TestParams) -> SimSetup:
    return SimSetup(
        samples=params.samples,
        interval_ns=params.interval_ns,
        timeout_cycles=params.timeout_cycles,
        backups=params.backups,
        seed=params.seed,
    )


def run_sim(case: TestCase, params: TestParams, faults: Optional[FaultPlan] = None) -> SimRun:
    tb = SimTestbed(_sim_setup(params), faults)
    run = SimRun(tb)
    tb.vpcmo.phase_hooks.append(
        lambda rec: run.phase_log.append((tb.loop.now, rec.workflow_id, rec.kind, rec.phase))
    )

    def kill() -> None:
        run.kills.append(tb.icps.next_seq)
        tb.kill_active()

    if case == TestCase.REPLACEMENT:
        tb.at_seq(params.kill_at, kill)
        if params.second_kill_at:
            tb.at_seq(params.second_kill_at, kill)
    elif case == TestCase.RECONFIGURATION:
        for at, vpf in zip(reconfig_points(params.samples, params.reconfigs), alternating_vpfs(params.reconfigs)):
            tb.at_seq(at, lambda v=vpf: run.workflows.append((tb.vpcmo.reconfigure(tb.cluster.cluster_id, v), v)))
    elif case == TestCase.REDEPLOYMENT:
        at = params.samples // 2

        def redeploy() -> None:
            vpf = tb.cluster.vpfs[0].key
            run.workflows.append((tb.vpcmo.redeploy(tb.cluster.cluster_id, params.redeploy_site), vpf))

        tb.at_seq(at, redeploy)
    tb.run()
    run.takeovers = [t for t, name, _, _ in tb.vpcmo.events if name == "takeover"]
    return run


def schedule_of(run: SimRun, initial: Tuple[int, int] = INVERT) -> List[Tuple[int, str]]:
    sched = [(1, kind_name(initial))]
    for rec, vpf in run.workflows:
        if rec.phase in (Phase.COMMITTED, Phase.RELEASED) and rec.boundary_seq is not None:
            sched.append((rec.boundary_seq, kind_name(vpf)))
    return sched


def live_checks(case: TestCase, params: TestParams, run: SimRun) -> Dict[str, bool]:
    tb = run.testbed
    checks: Dict[str, bool] = {}
    counts = tb.outputs
    checks["single_writer"] = all(c == 1 for c in counts.values())
    if case != TestCase.REPLACEMENT:
        checks["one_output_per_seq"] = sorted(counts) == list(range(1, params.samples + 1))
    checks["state_matches_replay"] = all(
        i.states == replay_state(i, i.last_processed_seq) for i in tb.live_instances()
    )
    live = tb.cluster
    checks["anti_affinity"] = all(
        len(set(c.irs)) == len(c.irs) for c in tb.vpcmo.clusters.values()
    )
    if case in (TestCase.RECONFIGURATION, TestCase.REDEPLOYMENT):
        checks["workflows_committed"] = bool(run.workflows) and all(
            rec.phase == Phase.RELEASED for rec, _ in run.workflows
        )
        checks["old_clusters_released"] = all(
            i.role == VpcRole.RELEASED for i in tb.instances() if i.cluster_id != live.cluster_id
        )
    if case == TestCase.REPLACEMENT:
        commits = [t for t, _, kind, ph in run.phase_log if kind == WorkflowKind.RESTORE_REDUNDANCY and ph == Phase.COMMITTED]
        checks["redundancy_restored_within_1s"] = len(run.takeovers) == len(run.kills) and all(
            any(t <= c <= t + SEC for c in commits) for t in run.takeovers
        )
        checks["cluster_size_restored"] = len(live.members) == 1 + params.backups
    return checks


def run_test(case: TestCase, params: TestParams) -> TestReport:
    case = TestCase(case)
    params.validate(case)
    channel = ChannelKind(params.channel)
    if channel is not ChannelKind.IN_PROCESS:
        from .procs import run_socket_test

        return run_socket_test(case, params)
    return run_in_process(case, params)[0]


def run_in_process(case: TestCase, params: TestParams) -> Tuple[TestReport, SimRun]:
    """Run on the simulated channel; also returns the testbed for inspection."""
    case = TestCase(case)
    params.validate(case)
    run = run_sim(case, params)
    tb = run.testbed
    meta = params.meta(case)
    meta["schedule"] = format_schedule(schedule_of(run))
    meta["kills"] = ",".join(map(str, run.kills))
    meta["duplicates"] = str(tb.icps.duplicates)
    if case == TestCase.REDEPLOYMENT:
        meta["redeploys"] = str(len(run.workflows))
        meta["handovers"] = ",".join(str(r.boundary_seq) for r, _ in run.workflows if r.boundary_seq)
    records = tb.icps.trace()
    path = ""
    if params.out_dir:
        os.makedirs(params.out_dir, exist_ok=True)
        path = os.path.join(params.out_dir, f"{case.value}-{meta['channel']}.csv")
        write_trace(path, records, meta)
    rep = evaluate(records, meta, path)
    rep.live_checks = live_checks(case, params, run)
    rep.informational = published_comparison(rep.stats)
    if params.out_dir:
        with open(os.path.join(params.out_dir, f"{case.value}-{meta['channel']}.json"), "w") as fh:
            fh.write(rep.to_json())
    return rep, run


# -- single-fault sweep over workflow phases ----------------------------------

SWEEP_PHASES = (Phase.DEPLOYING, Phase.SYNCING, Phase.READY, Phase.HANDOVER_ISSUED, Phase.COMMITTED, Phase.RELEASED)
SWEEP_FAULTS = ("crash-new-leader", "crash-new-ir", "crash-old-active", "drop-control")
_CONTROL_TYPES = (MsgType.STATE_SYNC, MsgType.SYNC_ACK, MsgType.HANDOVER_CMD, MsgType.HANDOVER_ACK)


@dataclass
class SweepResult:
    phase: Phase
    fault: str
    final_phase: Phase
    missed_blocks: List[Tuple[int, int]]
    wrong_outputs: int
    stuck: List[int]
    fired: bool

    @property
    def ok(self) -> bool:
        return self.fired and self.final_phase in (Phase.FAILED, Phase.RELEASED) and not self.stuck and not self.wrong_outputs


def sweep_case(
    phase: Phase, fault: str, samples: int = 2_500, trigger: int = 500, timeout_cycles: int = 2, seed: int = 0
) -> SweepResult:
    """Reconfigure once and inject fault when the workflow enters phase."""
    from .report import expected_output, missed_blocks

    armed: set = set()

    def drop(src: int, msg_type: int, seq: int) -> bool:
        if msg_type in armed:
            armed.discard(msg_type)
            return True
        return False

    faults = FaultPlan(drop_filter=drop)
    tb = SimTestbed(SimSetup(samples=samples, timeout_cycles=timeout_cycles, seed=seed), faults)
    holder: Dict[str, object] = {"fired": False}

    def hook(rec: WorkflowRecord) -> None:
        if rec.kind != WorkflowKind.RECONFIGURE or rec.phase != phase or holder["fired"]:
            return
        holder["fired"] = True
        new = tb.vpcmo.clusters.get(rec.new_cluster)
        old = tb.vpcmo.clusters.get(rec.old_cluster)
        if fault == "crash-new-leader":
            tb.crash(new.leader)
        elif fault == "crash-new-ir":
            tb.crash(new.members[0][1])
        elif fault == "crash-old-active":
            tb.crash(old.leader)
        elif fault == "drop-control":
            armed.update(int(t) for t in _CONTROL_TYPES)
        else:
            raise ValueError(f"unknown fault {fault!r}")

    tb.vpcmo.phase_hooks.append(hook)
    wf: List[WorkflowRecord] = []
    tb.at_seq(trigger, lambda: wf.append(tb.vpcmo.reconfigure(tb.cluster.cluster_id, IDENTITY)))
    tb.run()
    rec = wf[0]
    sched = [(1, "invert")]
    if rec.phase in (Phase.COMMITTED, Phase.RELEASED):
        sched.append((rec.boundary_seq, "identity"))
    trace = tb.icps.trace()
    wrong = sum(1 for r in trace if not r.missed and r.output_bit != expected_output(sched, r.seq, r.input_bit))
    stuck = [w.workflow_id for w in tb.vpcmo.workflows.values() if not w.done]
    return SweepResult(phase, fault, rec.phase, missed_blocks(trace), wrong, stuck, bool(holder["fired"]))


def run_sweep(**kw) -> List[SweepResult]:
    return [sweep_case(ph, f, **kw) for ph in SWEEP_PHASES for f in SWEEP_FAULTS]
