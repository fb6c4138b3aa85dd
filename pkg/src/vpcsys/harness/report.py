"""Test reports computed from a trace alone, so a CSV can be re-checked offline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from ..domain import MS, NoMeasurableSamples, RunStats, classify_rt, compute_stats, stats_from_cycles
from ..icps_sim import TraceRecord, read_trace
from ..vpf import VpfKind

#: half-width, in cycles, of the window compared around each handover boundary
HANDOVER_WINDOW = 50

_TRANSFER = {
    VpfKind.INVERT.name.lower(): lambda x: 1 - x,
    VpfKind.IDENTITY.name.lower(): lambda x: x,
    VpfKind.RISING_EDGE_COUNTER.name.lower(): lambda x: x,
}

Schedule = List[Tuple[int, str]]


def format_schedule(schedule: Schedule) -> str:
    return ";".join(f"{seq}:{kind}" for seq, kind in schedule)


def parse_schedule(text: str) -> Schedule:
    out: Schedule = []
    for part in filter(None, text.split(";")):
        seq, _, kind = part.partition(":")
        if kind not in _TRANSFER:
            raise ValueError(f"unknown transfer function {kind!r} in schedule")
        out.append((int(seq), kind))
    return sorted(out)


def expected_output(schedule: Schedule, seq: int, input_bit: int) -> int:
    kind = schedule[0][1]
    for start, k in schedule:
        if seq >= start:
            kind = k
    return _TRANSFER[kind](input_bit)


def missed_blocks(records: Sequence[TraceRecord]) -> List[Tuple[int, int]]:
    """Contiguous runs of missed seqs as (first, length)."""
    blocks: List[Tuple[int, int]] = []
    for r in records:
        if not r.missed:
            continue
        if blocks and blocks[-1][0] + blocks[-1][1] == r.seq:
            blocks[-1] = (blocks[-1][0], blocks[-1][1] + 1)
        else:
            blocks.append((r.seq, 1))
    return blocks


def active_changes(records: Sequence[TraceRecord]) -> int:
    ids = [r.active_id for r in records if r.active_id]
    return sum(1 for a, b in zip(ids, ids[1:]) if a != b)


def schedule_slip(records: Sequence[TraceRecord], interval_ns: int) -> int:
    """Worst lateness of an ICPS send against its own fixed-rate schedule.

    A slip of a whole interval or more means the sender itself was held off
    the CPU, so the host was not quiet during the run.
    """
    offsets = [r.t_send - r.seq * interval_ns for r in records]
    return max(offsets) - min(offsets) if offsets else 0


@dataclass
class TestReport:
    case: str
    params: Dict[str, str]
    stats: Optional[Dict[str, float]]
    missed_count: int
    duplicates: int
    rt_classes: List[int]
    phase_stats: Dict[str, Optional[Dict[str, float]]]
    checks: Dict[str, bool]
    details: Dict[str, str] = field(default_factory=dict)
    trace_path: str = ""
    live_checks: Dict[str, bool] = field(default_factory=dict)
    informational: Dict[str, str] = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def passed(self) -> bool:
        return all(self.checks.values()) and all(self.live_checks.values())

    @property
    def violations(self) -> List[str]:
        return [k for k, ok in {**self.checks, **self.live_checks}.items() if not ok]

    def trace_view(self) -> dict:
        """Fields derivable from the trace file alone."""
        d = asdict(self)
        for k in ("trace_path", "live_checks", "informational"):
            d.pop(k)
        return d

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _stats_dict(stats: RunStats) -> Dict[str, float]:
    return stats.as_dict()


def _window_stats(records: Sequence[TraceRecord], boundaries: Sequence[int]) -> Tuple[List[int], List[int]]:
    inside, outside = [], []
    for r in records:
        if r.missed:
            continue
        near = any(abs(r.seq - b) <= HANDOVER_WINDOW for b in boundaries)
        (inside if near else outside).append(r.cycle_time)
    return inside, outside


def evaluate(records: Sequence[TraceRecord], meta: Dict[str, str], trace_path: str = "") -> TestReport:
    """Recompute statistics and every trace-derived acceptance rule."""
    case = meta.get("case", "normal")
    interval = int(meta.get("interval_ns", MS))
    k = int(meta.get("timeout_cycles", 2))
    kills = [int(x) for x in meta.get("kills", "").split(",") if x]
    schedule = parse_schedule(meta.get("schedule", "1:invert"))
    boundaries = [seq for seq, _ in schedule[1:]]
    duplicates = int(meta.get("duplicates", 0))
    expected_samples = int(meta.get("samples", len(records)))

    samples = [r.sample() for r in records]
    missed = sum(1 for r in records if r.missed)
    try:
        stats: Optional[RunStats] = compute_stats(samples)
    except NoMeasurableSamples:
        stats = None

    checks: Dict[str, bool] = {}
    details: Dict[str, str] = {}
    checks["complete_trace"] = [r.seq for r in records] == list(range(1, expected_samples + 1))

    wrong = [r.seq for r in records if not r.missed and r.output_bit != expected_output(schedule, r.seq, r.input_bit)]
    checks["output_matches_oracle"] = not wrong
    if wrong:
        details["output_matches_oracle"] = f"{len(wrong)} wrong outputs, first at seq {wrong[0]}"

    checks["p9999_below_interval"] = stats is not None and stats.p9999 < interval
    blocks = missed_blocks(records)
    changes = active_changes(records)
    details["missed_blocks"] = ",".join(f"{s}+{n}" for s, n in blocks)
    details["active_changes"] = str(changes)
    details["schedule_slip_ns"] = str(schedule_slip(records, interval))

    if case == "replacement":
        ok = len(blocks) <= len(kills) and all(n <= k + 1 for _, n in blocks)
        ok = ok and all(any(kill <= s <= kill + k + 1 for kill in kills) for s, _ in blocks)
        checks["missed_block_bounded"] = ok
        checks["active_changes_once_per_kill"] = changes == len(kills)
    else:
        checks["no_missed"] = missed == 0
        checks["no_duplicates"] = duplicates == 0
    if case == "normal":
        checks["single_responder"] = changes == 0
    phase_stats: Dict[str, Optional[Dict[str, float]]] = {}
    if case in ("reconfiguration", "redeployment"):
        expected = int(meta.get("reconfigs" if case == "reconfiguration" else "redeploys", 1))
        checks["boundaries_committed"] = len(boundaries) == expected if case == "reconfiguration" else True
        checks["flip_at_boundaries"] = all(
            b - 1 in {r.seq for r in records if not r.missed} and b in {r.seq for r in records if not r.missed}
            for b in boundaries
        ) and checks["output_matches_oracle"]
        hb = [int(x) for x in meta.get("handovers", "").split(",") if x] or boundaries
        inside, outside = _window_stats(records, hb)
        phase_stats["handover"] = _stats_dict(stats_from_cycles(inside)) if inside else None
        phase_stats["steady"] = _stats_dict(stats_from_cycles(outside)) if outside else None
        if inside and stats is not None:
            checks["handover_window_p9999"] = stats_from_cycles(inside).p9999 <= 2 * stats.p9999
        else:
            checks["handover_window_p9999"] = False

    return TestReport(
        case=case,
        params={k2: v for k2, v in meta.items() if k2 not in ("duplicates",)},
        stats=_stats_dict(stats) if stats else None,
        missed_count=missed,
        duplicates=duplicates,
        rt_classes=sorted(classify_rt(stats)) if stats else [],
        phase_stats=phase_stats,
        checks=checks,
        details=details,
        trace_path=trace_path,
    )


def report(trace_path: str) -> TestReport:
    records, meta = read_trace(trace_path)
    return evaluate(records, meta, trace_path)


def published_comparison(stats: Optional[Dict[str, float]]) -> Dict[str, str]:
    """Side-by-side with the published testbed figures; never asserted."""
    if not stats:
        return {}
    med_us = stats["median"] / 1000
    max_us = stats["max"] / 1000
    return {
        "median_us": f"{med_us:.1f} (published testbed: 300-400)",
        "max_us": f"{max_us:.1f} (published testbed: below 900)",
        "p9999_us": f"{stats['p9999'] / 1000:.1f}",
        "jitter_us": f"{stats['jitter'] / 1000:.1f}",
    }
