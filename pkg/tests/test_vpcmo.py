import pytest
from hypothesis import given, strategies as st

from vpcsys.domain import MS, MsgType, VpcRole
from vpcsys.harness.report import missed_blocks
from vpcsys.harness.testbed import IDENTITY, INVERT, SimSetup, SimTestbed
from vpcsys.protocol import IrCapabilities
from vpcsys.vpcmo import (
    DuplicateIr,
    InfrastructureResource,
    IrNotFound,
    Phase,
    PhaseError,
    PlacementError,
    Vpcmo,
    WorkflowKind,
    WorkflowLog,
    WorkflowRecord,
)
from vpcsys.vpf import VpfRegistry


def _bare(irs):
    """Orchestrator with IRs given as {ir_id: (site, clusters hosted, raw frames)}."""
    mo = Vpcmo(2, VpfRegistry())
    for ir_id, (site, load, raw) in irs.items():
        caps = IrCapabilities(site=site, supports_raw_frame=raw)
        mo.register_ir(InfrastructureResource(ir_id, caps, list(range(load))))
    return mo


def test_register_query_duplicate_unknown():
    mo = Vpcmo(2, VpfRegistry())
    res = InfrastructureResource(10, IrCapabilities(site="hall-A"))
    mo.register_ir(res)
    assert mo.query_ir(10).capabilities.site == "hall-A"
    with pytest.raises(DuplicateIr):
        mo.register_ir(InfrastructureResource(10))
    with pytest.raises(IrNotFound):
        mo.query_ir(99)


def test_least_loaded_placement():
    mo = _bare({10: ("hall-A", 0, True), 11: ("hall-A", 1, True)})
    assert mo.select_ir("hall-A") == 10


def test_placement_errors():
    mo = _bare({10: ("hall-A", 0, False)})
    with pytest.raises(PlacementError):
        mo.select_ir("hall-B")
    with pytest.raises(PlacementError):
        mo.select_ir("hall-A", rt_class=3)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=6))
def test_placement_picks_minimum_load(loads):
    mo = _bare({10 + i: ("hall-A", n, True) for i, n in enumerate(loads)})
    chosen = mo.select_ir("hall-A")
    assert loads[chosen - 10] == min(loads)
    assert chosen == 10 + loads.index(min(loads))


def test_phase_order_enforced():
    rec = WorkflowRecord(1, WorkflowKind.RECONFIGURE)
    rec.advance(Phase.SYNCING)
    with pytest.raises(PhaseError):
        rec.advance(Phase.DEPLOYING)
    rec.advance(Phase.FAILED, "x")
    with pytest.raises(PhaseError):
        rec.advance(Phase.READY)


@given(
    st.builds(
        WorkflowRecord,
        st.integers(0, 2**32 - 1),
        st.sampled_from(list(WorkflowKind)),
        st.sampled_from(list(Phase)),
        st.integers(0, 2**32 - 1),
        st.integers(0, 2**32 - 1),
        st.one_of(st.none(), st.integers(0, 2**32 - 1)),
        st.text(max_size=30),
    )
)
def test_workflow_record_round_trip(rec):
    assert WorkflowRecord.decode(rec.encode()) == rec


def test_restart_fails_open_workflows(tmp_path):
    path = str(tmp_path / "wf.log")
    log = WorkflowLog(path)
    done = WorkflowRecord(1, WorkflowKind.RECONFIGURE, Phase.RELEASED, 1, 2, 100)
    open_ = WorkflowRecord(2, WorkflowKind.REDEPLOY, Phase.SYNCING, 2, 3)
    log.append(done)
    log.append(open_)
    mo = Vpcmo(2, VpfRegistry(), log_path=path)
    assert mo.workflows[1].phase == Phase.RELEASED
    assert mo.workflows[2].phase == Phase.FAILED and mo.workflows[2].detail == "vpcmo restart"
    assert WorkflowLog(path).load()[2].phase == Phase.FAILED
    assert mo._next_wf == 3 and mo._next_cluster == 4


def _tb(samples=1500, **kw):
    return SimTestbed(SimSetup(samples=samples, **kw))


def test_reconfigure_unknown_vpf_fails_and_old_keeps_serving():
    tb = _tb()
    wf = []
    tb.at_seq(500, lambda: wf.append(tb.vpcmo.reconfigure(tb.cluster.cluster_id, (9, 9))))
    tb.run()
    assert wf[0].phase == Phase.FAILED and wf[0].new_cluster == 0
    trace = tb.icps.trace()
    assert not missed_blocks(trace) and all(r.output_bit == 1 - r.input_bit for r in trace)


def test_redeploy_needs_enough_irs_at_target():
    sites = {10: "hall-A", 11: "hall-A", 12: "hall-A", 30: "hall-C"}
    tb = _tb(ir_sites=sites)
    rec = tb.vpcmo.redeploy(tb.cluster.cluster_id, "hall-C")
    assert rec.phase == Phase.FAILED and "no feasible IR" in rec.detail


def test_redeploy_to_current_site_uses_fresh_irs():
    tb = _tb()
    old = tb.cluster
    wf = []
    tb.at_seq(500, lambda: wf.append(tb.vpcmo.redeploy(old.cluster_id, "hall-A")))
    tb.run()
    new = tb.cluster
    assert wf[0].phase == Phase.RELEASED
    assert new.site == "hall-A" and not set(new.irs) & set(old.irs)
    assert not missed_blocks(tb.icps.trace())


def test_restore_fails_without_spare_ir():
    tb = _tb(ir_sites={10: "hall-A", 11: "hall-A"})
    tb.at_seq(500, tb.kill_active)
    tb.run()
    restores = [w for w in tb.vpcmo.workflows.values() if w.kind == WorkflowKind.RESTORE_REDUNDANCY]
    assert restores and all(w.phase == Phase.FAILED for w in restores)
    assert len(tb.cluster.members) == 1


def test_back_to_back_crashes_never_colocate():
    tb = _tb(samples=3000)
    placements = []
    tb.vpcmo.phase_hooks.append(
        lambda rec: rec.kind == WorkflowKind.RESTORE_REDUNDANCY
        and rec.phase == Phase.COMMITTED
        and placements.append(list(tb.vpcmo.clusters[rec.new_cluster].irs))
    )
    tb.at_seq(800, tb.kill_active)
    tb.at_seq(1800, tb.kill_active)
    tb.run()
    assert len(placements) == 2
    assert all(len(set(irs)) == len(irs) == 2 for irs in placements)


def test_concurrent_workflows_are_queued():
    tb = _tb(samples=2500)
    wf = []

    def submit():
        wf.append(tb.vpcmo.reconfigure(tb.cluster.cluster_id, IDENTITY))
        wf.append(tb.vpcmo.reconfigure(tb.cluster.cluster_id, INVERT))

    tb.at_seq(500, submit)
    tb.run()
    assert [w.phase for w in wf] == [Phase.RELEASED, Phase.RELEASED]
    assert wf[0].boundary_seq < wf[1].boundary_seq
    assert wf[1].old_cluster == wf[0].new_cluster


def test_handover_only_after_readiness():
    tb = _tb()
    order = []
    tb.net.taps.append(
        lambda src, dest, m: m.msg_type in (MsgType.READY_TO_TAKEOVER, MsgType.HANDOVER_CMD)
        and order.append((m.msg_type, m.cluster_id))
    )
    wf = []
    tb.at_seq(500, lambda: wf.append(tb.vpcmo.reconfigure(tb.cluster.cluster_id, IDENTITY)))
    tb.run()
    first_cmd = next(i for i, (t, _) in enumerate(order) if t == MsgType.HANDOVER_CMD)
    ready = {c for t, c in order[:first_cmd] if t == MsgType.READY_TO_TAKEOVER}
    assert wf[0].new_cluster in ready


def test_old_instances_released_after_reconfigure():
    tb = _tb()
    old = tb.cluster.cluster_id
    tb.at_seq(500, lambda: tb.vpcmo.reconfigure(old, IDENTITY))
    tb.run()
    assert all(i.role == VpcRole.RELEASED for i in tb.instances() if i.cluster_id == old)
    assert tb.vpcmo.clusters[old].state == "released"
    assert all(old not in r.allocated for r in tb.vpcmo.irs.values())


def _cut_off_old_cluster(tb, ms):
    """When the handover is issued, hold control traffic to the old cluster."""
    held = {}

    def hook(rec):
        if rec.phase == Phase.HANDOVER_ISSUED and not held:
            old = tb.vpcmo.clusters[rec.old_cluster]
            held["boundary"] = rec.boundary_seq
            pairs = {frozenset((2, n)) for n in old.nodes}
            tb.faults.partition |= pairs
            tb.loop.call_later(ms * MS, lambda: tb.faults.partition.difference_update(pairs))

    tb.vpcmo.phase_hooks.append(hook)
    return held


def test_boundary_passed_by_old_cluster_is_moved():
    tb = _tb()
    held = _cut_off_old_cluster(tb, 20)
    wf = []
    tb.at_seq(500, lambda: wf.append(tb.vpcmo.reconfigure(tb.cluster.cluster_id, IDENTITY)))
    tb.run()
    rec = wf[0]
    assert rec.phase == Phase.RELEASED and rec.boundary_seq > held["boundary"] + 10
    trace = tb.icps.trace()
    assert not missed_blocks(trace) and tb.icps.duplicates == 0
    assert all(c == 1 for c in tb.outputs.values())
    for r in trace:
        assert r.output_bit == (r.input_bit if r.seq >= rec.boundary_seq else 1 - r.input_bit)
