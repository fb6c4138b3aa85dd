import pytest
from hypothesis import given, settings, strategies as st

from vpcsys import protocol as p
from vpcsys.domain import MS, US, MsgType
from vpcsys.transport import ChannelKind, EndpointClosed, UnknownPeer
from vpcsys.transport.inproc import EventLoop, FaultPlan, InProcessNetwork, LatencyModel


def _sync(src, seq=0):
    return p.make(MsgType.STATE_SYNC, src, p.StateSyncPayload(seq).encode(), seq=seq)


def test_channel_kind_names():
    assert {k.value for k in ChannelKind} == {"inproc", "udp", "l2"}


def test_transparent_channel():
    net = InProcessNetwork()
    a, b = net.open(1), net.open(2)
    msg = p.make(MsgType.SENSOR_INPUT, 1, b"\x01", seq=3)
    a.send(2, msg)
    assert b.receive(MS) == (msg, 1)


def test_drop_filter_by_type_and_source():
    plan = FaultPlan(drop_filter=lambda src, t, seq: src == 2 and t == MsgType.STATE_SYNC)
    net = InProcessNetwork(faults=plan)
    eps = {n: net.open(n) for n in (1, 2, 3)}
    sent = [(2, _sync(2, 1)), (2, p.make(MsgType.SYNC_ACK, 2, p.SyncAckPayload(1).encode())), (1, _sync(1, 2))]
    for src, msg in sent:
        eps[src].send(3, msg)
    got = []
    with pytest.raises(TimeoutError):
        while True:
            got.append(eps[3].receive(MS)[0])
    assert got == [sent[1][1], sent[2][1]]
    assert net.dropped == 1


def test_partition_times_out():
    net = InProcessNetwork(faults=FaultPlan(partition={frozenset((1, 2))}))
    a, b = net.open(1), net.open(2)
    a.send(2, _sync(1))
    with pytest.raises(TimeoutError):
        b.receive(5 * MS)


def test_management_layer_ignores_faults():
    net = InProcessNetwork(faults=FaultPlan(drop_filter=lambda *_: True, partition={frozenset((1, 2))}))
    a, b = net.open(1), net.open(2)
    msg = p.make(MsgType.DEPLOY_VPC, 1, b"")
    a.send(2, msg)
    assert b.receive(MS)[0] == msg


def test_unknown_peer_and_closed_endpoint():
    net = InProcessNetwork()
    a = net.open(1)
    with pytest.raises(UnknownPeer):
        a.send(9, _sync(1))
    a.close()
    with pytest.raises(EndpointClosed):
        a.send(1, _sync(1))


def test_crashed_node_neither_sends_nor_receives():
    net = InProcessNetwork()
    a, b = net.open(1), net.open(2)
    net.crash(2)
    a.send(2, _sync(1))
    b.send(1, _sync(2))
    with pytest.raises(TimeoutError):
        a.receive(MS)
    assert not b._inbox


def test_event_loop_orders_by_time_then_insertion():
    loop = EventLoop()
    seen = []
    loop.call_at(20, seen.append, "c")
    loop.call_at(10, seen.append, "a")
    loop.call_at(10, seen.append, "b")
    t = loop.call_at(15, seen.append, "x")
    t.cancel()
    loop.run_until(30)
    assert seen == ["a", "b", "c"] and loop.now == 30


@settings(max_examples=50)
@given(st.integers(0, 2**16), st.lists(st.integers(0, 1), min_size=1, max_size=60))
def test_fifo_per_pair_under_jitter(seed, bits):
    net = InProcessNetwork(latency=LatencyModel(100 * US, 500 * US, seed))
    a, b = net.open(1), net.open(2)
    for i, bit in enumerate(bits, start=1):
        a.send(2, p.make(MsgType.SENSOR_INPUT, 1, p.bit_payload(bit), seq=i))
        net.loop.run_until(net.loop.now + 10 * US)
    got = [b.receive(10 * MS)[0].seq for _ in bits]
    assert got == list(range(1, len(bits) + 1))


def test_same_seed_same_schedule():
    def run(seed):
        net = InProcessNetwork(latency=LatencyModel(100 * US, 50 * US, seed))
        a, b = net.open(1), net.open(2)
        times = []
        b.on_message = lambda m, s: times.append(net.loop.now)
        for i in range(20):
            net.loop.call_at(i * MS, a.send, 2, _sync(1, i))
        net.loop.run_until(30 * MS)
        return times

    assert run(7) == run(7)
    assert run(7) != run(8)
