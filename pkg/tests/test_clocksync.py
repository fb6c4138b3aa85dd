import pytest
from hypothesis import given, strategies as st

from vpcsys import protocol as p
from vpcsys.clocksync import (
    ClockOffsetSample,
    EmptyReport,
    Grandmaster,
    NonCausalTimestamps,
    ProbeClient,
    SyncConfig,
    estimate_offset,
    sync_report,
)
from vpcsys.domain import MS, US, MsgType
from vpcsys.runtime import Actor, SimRuntime
from vpcsys.transport.inproc import InProcessNetwork, LatencyModel

GM = 4


def _sim(delta, probes=10, base_ns=0, interval=MS, clock=None):
    net = InProcessNetwork(latency=LatencyModel(base_ns))
    rt = SimRuntime(net)
    rt.add(Grandmaster(GM), clock=clock or (lambda t: t + delta))
    client = ProbeClient(10, GM, SyncConfig(interval), max_probes=probes)
    rt.add(client)
    rt.run_while(lambda: not client.done, 10 * probes * interval)
    return client


def test_symmetric_zero_offset():
    assert estimate_offset(0, 100, 100, 200) == 0


def test_asymmetric_arithmetic():
    assert estimate_offset(0, 150, 160, 100) == 105


def test_non_causal():
    with pytest.raises(NonCausalTimestamps):
        estimate_offset(100, 0, 0, 50)
    with pytest.raises(NonCausalTimestamps):
        estimate_offset(0, 10, 5, 20)


def test_injected_skew_zero_delay():
    client = _sim(1_000)
    assert [s.offset for s in client.samples] == [1_000] * 10


@given(st.integers(-(10**6), 10**6), st.integers(0, 500 * US))
def test_offset_recovered_exactly_on_symmetric_path(delta, one_way):
    t1 = 5 * MS
    t2 = t1 + one_way + delta
    t4 = t1 + 2 * one_way
    assert estimate_offset(t1, t2, t2, t4) == delta
    assert ClockOffsetSample.from_times(1, t1, t2, t2, t4).round_trip == 2 * one_way


@given(st.integers(-(10**9), 10**9), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_offset_antisymmetric_under_time_reversal(t1, a, b, c):
    t2, t3, t4 = t1 + a, t1 + a + b, t1 + a + b + c
    forward = estimate_offset(t1, t2, t3, t4)
    assert estimate_offset(-t4, -t3, -t2, -t1) == -forward


@given(st.integers(0, 10**9), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(-(10**6), 10**6))
def test_offset_shift_equivariant(t1, one_way, hold, delta):
    t2 = t1 + one_way
    t3 = t2 + hold
    t4 = t3 + one_way
    assert estimate_offset(t1, t2, t3, t4) == 0
    assert estimate_offset(t1, t2 + delta, t3 + delta, t4) == delta


def test_skew_ramp_report():
    interval = MS
    client = _sim(0, probes=1000, interval=interval, clock=lambda t: t + t // interval)
    rep = sync_report(list(client.samples))
    assert (rep.n, rep.max_abs, rep.min, rep.max) == (1000, 999, 0, 999)
    assert "max |offset| 999 ns" in rep.format()


def test_report_values():
    samples = [ClockOffsetSample(i, off, 0, 0) for i, off in enumerate([-10, 0, 25])]
    rep = sync_report(samples)
    assert (rep.max_abs, rep.median, rep.min, rep.max) == (25, 0, -10, 25)
    zeros = sync_report([ClockOffsetSample(i, 0, 0, 0) for i in range(4)])
    assert (zeros.max_abs, zeros.median, zeros.min, zeros.max) == (0, 0, 0, 0)


def test_empty_report():
    with pytest.raises(EmptyReport):
        sync_report([])


class _Recorder(Actor):
    def __init__(self, node_id):
        self.node_id = node_id
        self.got = []

    def on_message(self, msg, sender):
        self.got.append(msg)


def test_grandmaster_echo_contract():
    rt = SimRuntime()
    rt.add(Grandmaster(GM))
    rec = rt.add(_Recorder(11))
    rt.loop.run_until(MS)
    assert rec.got == []  # no probes, no replies
    rec.send(GM, p.make(MsgType.CLOCK_PROBE, 11, p.encode_probe(77), seq=5))
    rt.loop.run_until(2 * MS)
    (reply,) = rec.got
    t1, t2, t3 = p.decode_probe_reply(reply.payload)
    assert reply.seq == 5 and t1 == 77 and t2 <= t3


def test_two_clients_get_their_own_replies():
    rt = SimRuntime(InProcessNetwork(latency=LatencyModel(50 * US, 20 * US, 3)))
    rt.add(Grandmaster(GM))
    a = rt.add(ProbeClient(10, GM, SyncConfig(MS), max_probes=20))
    b = rt.add(ProbeClient(11, GM, SyncConfig(MS), max_probes=20))
    rt.run_while(lambda: not (a.done and b.done), SEC_LIMIT)
    assert len(a.samples) == len(b.samples) == 20


SEC_LIMIT = 1_000 * MS
