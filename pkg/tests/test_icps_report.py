import pytest

from vpcsys import protocol as p
from vpcsys.domain import MS, US, MsgType
from vpcsys.harness.cases import TestCase, TestParams, run_test
from vpcsys.harness.report import (
    active_changes,
    evaluate,
    expected_output,
    format_schedule,
    missed_blocks,
    parse_schedule,
    report,
    schedule_slip,
)
from vpcsys.icps_sim import (
    IcpsActor,
    IcpsConfig,
    TraceFormatError,
    TraceRecord,
    generate_signal,
    read_trace,
    write_trace,
)
from vpcsys.runtime import Actor, SimRuntime
from vpcsys.transport.inproc import InProcessNetwork, LatencyModel


class Echo(Actor):
    """Inverting responder that skips a given set of seqs."""

    def __init__(self, node_id, skip=()):
        self.node_id = node_id
        self.skip = set(skip)

    def on_message(self, msg, sender):
        if msg.msg_type == MsgType.SENSOR_INPUT and msg.seq not in self.skip:
            bit = 1 - p.read_bit(msg)
            self.send(sender, p.make(MsgType.ACTUATOR_OUTPUT, self.node_id, p.bit_payload(bit), seq=msg.seq))


def _icps_run(n, skip=(), delay=200 * US):
    rt = SimRuntime(InProcessNetwork(latency=LatencyModel(delay)))
    rt.add(Echo(50, skip))
    icps = IcpsActor(IcpsConfig(1, MS, n, start_ns=0), {7: [50]})
    rt.add(icps)
    rt.run_while(lambda: not icps.finished, (n + 5) * MS)
    return icps


def test_signal_parity():
    assert [generate_signal(s) for s in (0, 1, 10_001)] == [0, 1, 1]


def test_icps_config_validation():
    with pytest.raises(ValueError):
        IcpsConfig(transfer_interval_ns=0)
    with pytest.raises(ValueError):
        IcpsConfig(n_samples=0)
    assert IcpsConfig(transfer_interval_ns=2 * MS).response_deadline_ns == 2 * MS


def test_fixed_rate_schedule_and_round_trip():
    icps = _icps_run(200)
    trace = icps.trace()
    assert [r.seq for r in trace] == list(range(1, 201))
    assert all(r.t_send == r.seq * MS for r in trace)
    assert all(r.cycle_time == 400 * US and r.output_bit == 1 - r.input_bit for r in trace)
    assert schedule_slip(trace, MS) == 0


def test_unanswered_seqs_are_missed_not_retried():
    icps = _icps_run(50, skip={10, 11, 30})
    trace = icps.trace()
    assert missed_blocks(trace) == [(10, 2), (30, 1)]
    assert all(r.cycle_time == 0 for r in trace if r.missed)


def test_late_response_is_a_miss():
    icps = _icps_run(20, delay=600 * US)
    assert all(r.missed for r in icps.trace())
    assert icps.late == 19  # the last answer lands after the run has ended


def _rows():
    # hand-built: cycle times 300, 350, missed, 400, 500 us
    recs = [
        TraceRecord(1, 1 * MS, 1, 1 * MS + 300 * US, 0, 100, 100),
        TraceRecord(2, 2 * MS, 0, 2 * MS + 350 * US, 1, 100, 100),
        TraceRecord(3, 3 * MS, 1, 0, None, 0, 100, True),
        TraceRecord(4, 4 * MS, 0, 4 * MS + 400 * US, 1, 100, 100),
        TraceRecord(5, 5 * MS, 1, 5 * MS + 500 * US, 0, 100, 100),
    ]
    return recs


def test_csv_round_trip(tmp_path):
    path = str(tmp_path / "t.csv")
    write_trace(path, _rows(), {"case": "normal", "samples": "5"})
    recs, meta = read_trace(path)
    assert recs == _rows() and meta == {"case": "normal", "samples": "5"}
    with open(path) as fh:
        lines = fh.read().splitlines()
    assert lines[2] == "seq,t_send_ns,t_recv_ns,cycle_ns,input,output,responder,active_id,missed"
    assert lines[5] == "3,3000000,0,0,1,,0,100,1"


def test_hand_built_trace_stats(tmp_path):
    path = str(tmp_path / "t.csv")
    write_trace(path, _rows(), {"case": "normal", "samples": "5"})
    rep = report(path)
    s = rep.stats
    # sorted [300, 350, 400, 500]: ranks ceil(n*q) -> p25 #1, median #2, p75 #3, p9999 #4
    assert (s["n"], s["min"], s["p25"], s["median"], s["p75"], s["p9999"], s["max"]) == (
        4, 300 * US, 300 * US, 350 * US, 400 * US, 500 * US, 500 * US,
    )
    assert (s["iqr"], s["jitter"], s["outlier_count"]) == (100 * US, 200 * US, 0)
    assert rep.missed_count == 1
    assert not rep.checks["no_missed"] and rep.checks["output_matches_oracle"]


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda ls: ls[:1] + ["seq,a,b"] + ls[2:], "row 2: expected header"),
        (lambda ls: ls[:3] + ["3,1,2"] + ls[4:], "row 4: expected 9 fields"),
        (lambda ls: ls[:3] + ["x,1,2,1,1,1,1,1,0"] + ls[4:], "row 4"),
        (lambda ls: ls[:3] + ["2,2000000,2350000,1,0,1,100,100,0"] + ls[4:], "row 4: cycle_ns"),
        (lambda ls: ls[:3] + ["2,2000000,2350000,350000,0,,100,100,0"] + ls[4:], "row 4: output missing"),
    ],
)
def test_malformed_rows_name_the_row(tmp_path, mutate, message):
    path = tmp_path / "t.csv"
    write_trace(str(path), _rows(), {"case": "normal"})
    lines = path.read_text().splitlines()
    path.write_text("\n".join(mutate(lines)) + "\n")
    with pytest.raises(TraceFormatError, match=message):
        read_trace(str(path))


def test_schedule_text_round_trip():
    sched = [(1, "invert"), (2500, "identity"), (5012, "invert")]
    assert parse_schedule(format_schedule(sched)) == sched
    assert expected_output(sched, 2499, 1) == 0
    assert expected_output(sched, 2500, 1) == 1
    assert expected_output(sched, 5012, 0) == 1


def test_active_changes_ignores_missed_rows():
    recs = _rows()
    recs[3].active_id = recs[4].active_id = 101
    assert active_changes(recs) == 1


@pytest.mark.parametrize("case", [TestCase.NORMAL, TestCase.REPLACEMENT, TestCase.RECONFIGURATION])
def test_offline_report_matches_live(tmp_path, case):
    params = TestParams(samples=2_000, kill_at=1_000, out_dir=str(tmp_path))
    live = run_test(case, params)
    offline = report(live.trace_path)
    assert offline.trace_view() == live.trace_view()
    assert (tmp_path / f"{case.value}-inproc.json").exists()


def test_reconfiguration_boundary_flips_exactly():
    from vpcsys.harness.cases import run_sim

    run = run_sim(TestCase.RECONFIGURATION, TestParams(samples=3_000, reconfigs=1))
    (rec, _), = run.workflows
    b = rec.boundary_seq
    trace = {r.seq: r for r in run.testbed.icps.trace()}
    assert trace[b - 1].output_bit == 1 - trace[b - 1].input_bit
    assert trace[b].output_bit == trace[b].input_bit
    assert not any(r.missed for r in trace.values())


def test_evaluate_without_answers():
    recs = [TraceRecord(1, MS, 1, missed=True)]
    rep = evaluate(recs, {"case": "normal", "samples": "1"})
    assert rep.stats is None and not rep.passed and "p9999_below_interval" in rep.violations
