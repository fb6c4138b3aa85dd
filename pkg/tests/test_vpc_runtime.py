from hypothesis import given, strategies as st

from vpcsys import protocol as p
from vpcsys.domain import MS, MsgType, VpcRole
from vpcsys.vpc_runtime import ClusterConfig, VpcInstance
from vpcsys.vpf import VpfDescriptor, VpfKind, VpfState, apply_vpf

ICPS = 1
VPCMO = 2
INVERT = VpfDescriptor.make(1, 1, VpfKind.INVERT)
IDENTITY = VpfDescriptor.make(1, 2, VpfKind.IDENTITY)


def inst(node, role, members=(3, 5), k=2, window=5, vpf=INVERT, cluster=1, **kw):
    cfg = ClusterConfig(cluster, list(members), sync_timeout_cycles=k, ready_window=window, sync_interval_ns=MS)
    return VpcInstance(node, cfg, role, [vpf], vpcmo=VPCMO, **kw)


def sensor(seq, bit=None):
    return p.make(MsgType.SENSOR_INPUT, ICPS, p.bit_payload(seq % 2 if bit is None else bit), seq=seq)


def of_type(out, t):
    return [(d, m) for d, m in out if m.msg_type == t]


def handover(boundary, flags=0, cluster=9):
    return p.make(MsgType.HANDOVER_CMD, VPCMO, p.HandoverCmdPayload(boundary, cluster).encode(), flags=flags)


def test_active_inverts_and_answers_sender():
    a = inst(3, VpcRole.ACTIVE)
    (dest, msg), = of_type(a.handle(sensor(10, 0), 0), MsgType.ACTUATOR_OUTPUT)
    assert dest == ICPS and msg.seq == 10 and p.read_bit(msg) == 1


def test_inactive_executes_silently():
    b = inst(5, VpcRole.INACTIVE)
    out = b.handle(sensor(10, 0), 0)
    assert not of_type(out, MsgType.ACTUATOR_OUTPUT)
    assert b.last_processed_seq == 10 and b.states == [VpfState(0, 0)]


def test_active_stops_at_boundary():
    a = inst(3, VpcRole.ACTIVE)
    a.handle(sensor(50), 0)
    a.handle(handover(100), 0)
    assert not of_type(a.handle(sensor(100), 0), MsgType.ACTUATOR_OUTPUT)


def test_state_sync_carries_last_processed_seq():
    a = inst(3, VpcRole.ACTIVE)
    a.handle(sensor(42), 0)
    (dest, msg), = of_type(a.sync_tick(MS), MsgType.STATE_SYNC)
    assert dest == 5 and p.StateSyncPayload.decode(msg.payload).last_processed_seq == 42


def _sync_from(active, now):
    (_, msg), = of_type(active.sync_tick(now), MsgType.STATE_SYNC)
    return msg


def test_inactive_consistent_sync():
    a, b = inst(3, VpcRole.ACTIVE), inst(5, VpcRole.INACTIVE)
    for i in (41, 42):
        a.handle(sensor(i), 0)
        b.handle(sensor(i), 0)
    (dest, ack), = b.handle(_sync_from(a, MS), MS)
    assert dest == 3 and p.SyncAckPayload.decode(ack.payload) == p.SyncAckPayload(42, p.SYNC_CONSISTENT)


def test_inactive_behind_adopts_state():
    counter = VpfDescriptor.make(2, 1, VpfKind.RISING_EDGE_COUNTER)
    a, b = inst(3, VpcRole.ACTIVE, vpf=counter), inst(5, VpcRole.INACTIVE, vpf=counter)
    for i in range(1, 43):
        a.handle(sensor(i), 0)
        if i <= 40:
            b.handle(sensor(i), 0)
    out = b.handle(_sync_from(a, MS), MS)
    assert p.SyncAckPayload.decode(out[0][1].payload).status == p.SYNC_ADOPTED
    assert b.last_processed_seq == 42 and b.states == a.states == [VpfState(21, 0)]


def test_failover_timer_arithmetic():
    b = inst(5, VpcRole.INACTIVE, members=(3, 5))
    assert b.check_failover(1_500_000) == [] and b.role == VpcRole.INACTIVE
    out = b.check_failover(2_500_000)
    assert b.role == VpcRole.ACTIVE and b.term == 1
    assert [p.WorkflowStatusPayload.decode(m.payload).detail for _, m in out] == ["takeover:3"]


def test_own_pause_does_not_trigger_takeover():
    b = inst(5, VpcRole.INACTIVE, members=(3, 5))
    b.sync_tick(5 * MS)  # first event after a 5 ms stall of this process
    assert b.role == VpcRole.INACTIVE and b.pauses == 1


def test_lowest_live_id_wins():
    b3 = inst(3, VpcRole.INACTIVE, members=(1, 3, 5))
    b5 = inst(5, VpcRole.INACTIVE, members=(1, 3, 5))
    t = 0
    while t < 3 * MS:
        t += MS // 2
        out3 = b3.sync_tick(t)
        out5 = b5.sync_tick(t)
        for dest, m in out3:
            if dest == 5:
                b5.handle(m, t)
        for dest, m in out5:
            if dest == 3:
                b3.handle(m, t)
    assert b3.role == VpcRole.ACTIVE and b5.role == VpcRole.INACTIVE
    for dest, m in b3.sync_tick(t + MS // 2):
        if dest == 5:
            b5.handle(m, t + MS // 2)
    assert b5.leader_id == 3 and b5.term == b3.term == 1


def test_deposed_leader_steps_down():
    old = inst(3, VpcRole.ACTIVE)
    new = inst(5, VpcRole.INACTIVE)
    new.check_failover(3 * MS)
    assert new.role == VpcRole.ACTIVE
    old.handle(_sync_from(new, 3 * MS), 3 * MS)
    assert old.role == VpcRole.INACTIVE and old.leader_id == 5


def test_handover_accept_and_reject():
    a = inst(3, VpcRole.ACTIVE)
    a.handle(sensor(150), 0)
    (_, ack), = a.handle(handover(200), 0)
    assert p.HandoverAckPayload.decode(ack.payload).status == p.ACK_OK
    late = inst(3, VpcRole.ACTIVE)
    late.handle(sensor(120), 0)
    (_, ack), = late.handle(handover(100), 0)
    assert p.HandoverAckPayload.decode(ack.payload).status == p.ACK_REJECTED


def test_shadow_waits_for_confirm():
    s = inst(7, VpcRole.SHADOW, members=(7,), vpf=IDENTITY, cluster=9)
    s.handle(handover(5), 0)
    assert not s.transmits(5)
    s.handle(handover(5, p.FLAG_CONFIRM), 0)
    assert s.transmits(5) and not s.transmits(4)


def test_ready_window():
    s = inst(7, VpcRole.SHADOW, members=(7,), window=5)
    out = []
    for seq in range(10, 15):
        out += s.handle(sensor(seq), 0)
    (dest, msg), = of_type(out, MsgType.READY_TO_TAKEOVER)
    assert dest == VPCMO and p.decode_u32(msg.payload) == 14

    gap = inst(7, VpcRole.SHADOW, members=(7,), window=3)
    for seq in (10, 11, 13):
        assert not of_type(gap.handle(sensor(seq), 0), MsgType.READY_TO_TAKEOVER)
    assert gap.window == 1

    one = inst(7, VpcRole.SHADOW, members=(7,), window=1)
    assert of_type(one.handle(sensor(10), 0), MsgType.READY_TO_TAKEOVER)


def test_released_instance_is_inert():
    a = inst(3, VpcRole.ACTIVE)
    a.release(0)
    assert a.handle(sensor(1), 0) == [] and a.sync_tick(MS) == []


@given(st.integers(2, 60), st.integers(0, 30), st.integers(61, 80))
def test_single_writer_across_handover(boundary, accepted_at, end):
    accepted_at = min(accepted_at, boundary - 1)
    old = inst(3, VpcRole.ACTIVE)
    new = inst(7, VpcRole.SHADOW, members=(7,), vpf=IDENTITY, cluster=9)
    writers = {}
    for seq in range(1, end + 1):
        if seq == accepted_at + 1:
            for node in (old, new):
                node.handle(handover(boundary, p.FLAG_CONFIRM), 0)
        for node in (old, new):
            for _, m in of_type(node.handle(sensor(seq), 0), MsgType.ACTUATOR_OUTPUT):
                writers.setdefault(seq, []).append((node.node, p.read_bit(m)))
    assert sorted(writers) == list(range(1, end + 1))
    for seq, w in writers.items():
        (node, bit), = w
        vpf = INVERT if seq < boundary else IDENTITY
        assert node == (3 if seq < boundary else 7)
        assert bit == apply_vpf(vpf, VpfState(), seq % 2)[0]
