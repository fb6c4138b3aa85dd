"""Shared vocabulary: identities, message enums, RT classes and run statistics.

All durations are integer nanoseconds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

US = 1_000
MS = 1_000_000
SEC = 1_000_000_000

#: NodeId 0 means "unassigned"; real endpoints use 1..2**32-1.
UNASSIGNED = 0


class VpcError(Exception):
    """Base class for errors raised by this package."""


class NoMeasurableSamples(VpcError, ValueError):
    def __init__(self) -> None:
        super().__init__("no measurable samples")


def check_node_id(value: int) -> int:
    if not 0 < value < 2**32:
        raise ValueError(f"invalid NodeId {value!r}")
    return value


class MessageLayer(enum.IntEnum):
    DATA = 0
    CONTROL = 1
    MANAGEMENT = 2


class MsgType(enum.IntEnum):
    SENSOR_INPUT = 0
    ACTUATOR_OUTPUT = 1
    STATE_SYNC = 2
    SYNC_ACK = 3
    HANDOVER_CMD = 4
    HANDOVER_ACK = 5
    READY_TO_TAKEOVER = 6
    CLOCK_PROBE = 7
    CLOCK_PROBE_REPLY = 8
    DEPLOY_VPC = 16
    ASSIGN_VPF = 17
    RELEASE_CLUSTER = 18
    IR_REGISTER = 19
    IR_CAPABILITY_QUERY = 20
    IR_CAPABILITY_REPLY = 21
    RECONFIGURE_REQUEST = 22
    REDEPLOY_REQUEST = 23
    WORKFLOW_STATUS = 24


#: Layer each message type travels on by default.
DEFAULT_LAYER = {
    MsgType.SENSOR_INPUT: MessageLayer.DATA,
    MsgType.ACTUATOR_OUTPUT: MessageLayer.DATA,
    MsgType.STATE_SYNC: MessageLayer.CONTROL,
    MsgType.SYNC_ACK: MessageLayer.CONTROL,
    MsgType.HANDOVER_CMD: MessageLayer.CONTROL,
    MsgType.HANDOVER_ACK: MessageLayer.CONTROL,
    MsgType.READY_TO_TAKEOVER: MessageLayer.MANAGEMENT,
    MsgType.CLOCK_PROBE: MessageLayer.CONTROL,
    MsgType.CLOCK_PROBE_REPLY: MessageLayer.CONTROL,
    MsgType.DEPLOY_VPC: MessageLayer.MANAGEMENT,
    MsgType.ASSIGN_VPF: MessageLayer.MANAGEMENT,
    MsgType.RELEASE_CLUSTER: MessageLayer.MANAGEMENT,
    MsgType.IR_REGISTER: MessageLayer.MANAGEMENT,
    MsgType.IR_CAPABILITY_QUERY: MessageLayer.MANAGEMENT,
    MsgType.IR_CAPABILITY_REPLY: MessageLayer.MANAGEMENT,
    MsgType.RECONFIGURE_REQUEST: MessageLayer.MANAGEMENT,
    MsgType.REDEPLOY_REQUEST: MessageLayer.MANAGEMENT,
    MsgType.WORKFLOW_STATUS: MessageLayer.MANAGEMENT,
}


class VpcRole(enum.IntEnum):
    ACTIVE = 0
    INACTIVE = 1
    SHADOW = 2
    RELEASED = 3


@dataclass(frozen=True)
class RtClassRequirement:
    class_id: int
    cycle_time_min: int
    cycle_time_max: int
    jitter_max: int
    # class 3 reads "< 1 ms", the others are closed ranges
    cycle_max_exclusive: bool = False

    def satisfied_by(self, max_cycle: int, jitter: int) -> bool:
        if self.cycle_max_exclusive:
            cycle_ok = max_cycle < self.cycle_time_max
        else:
            cycle_ok = max_cycle <= self.cycle_time_max
        return cycle_ok and jitter <= self.jitter_max


RT_CLASSES = (
    RtClassRequirement(1, 10 * MS, 100 * MS, 1 * SEC),
    RtClassRequirement(2, 1 * MS, 10 * MS, 1 * MS),
    RtClassRequirement(3, 0, 1 * MS, 1 * US, cycle_max_exclusive=True),
)


@dataclass(frozen=True)
class CycleSample:
    seq: int
    t_send: int
    t_recv: int
    cycle_time: int
    responder: int
    missed: bool = False

    @classmethod
    def missing(cls, seq: int, t_send: int) -> "CycleSample":
        return cls(seq, t_send, 0, 0, UNASSIGNED, True)


@dataclass(frozen=True)
class RunStats:
    n: int
    min: int
    p25: int
    median: int
    p75: int
    p9999: int
    max: int
    iqr: int
    outlier_low: float
    outlier_high: float
    outlier_count: int
    jitter: int
    missed_count: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def nearest_rank(sorted_values: Sequence[int], num: int, den: int):
    """Value at 1-based rank ceil(num/den * n) of an ascending sequence."""
    n = len(sorted_values)
    rank = max(1, -(-num * n // den))
    return sorted_values[rank - 1]


def compute_stats(samples: Iterable[CycleSample]) -> RunStats:
    cycles = []
    missed = 0
    for s in samples:
        if s.missed:
            missed += 1
        else:
            cycles.append(s.cycle_time)
    return stats_from_cycles(cycles, missed)


def stats_from_cycles(cycles: Sequence[int], missed_count: int = 0) -> RunStats:
    if not cycles:
        raise NoMeasurableSamples()
    xs = sorted(cycles)
    p25 = nearest_rank(xs, 1, 4)
    p75 = nearest_rank(xs, 3, 4)
    iqr = p75 - p25
    # bounds are exact multiples of 0.5 ns; keep them as floats only for reporting
    low = p25 - 1.5 * iqr
    high = p75 + 1.5 * iqr
    # 2*x < 2*p25 - 3*iqr keeps the comparison in integers
    outliers = sum(1 for x in xs if 2 * x < 2 * p25 - 3 * iqr or 2 * x > 2 * p75 + 3 * iqr)
    return RunStats(
        n=len(xs),
        min=xs[0],
        p25=p25,
        median=nearest_rank(xs, 1, 2),
        p75=p75,
        p9999=nearest_rank(xs, 9999, 10000),
        max=xs[-1],
        iqr=iqr,
        outlier_low=low,
        outlier_high=high,
        outlier_count=outliers,
        jitter=xs[-1] - xs[0],
        missed_count=missed_count,
    )


def classify_rt(stats: RunStats, classes: Sequence[RtClassRequirement] = RT_CLASSES) -> set:
    """RT classes met on worst-case cycle time and jitter."""
    return {c.class_id for c in classes if c.satisfied_by(stats.max, stats.jitter)}


def rt_class(class_id: int) -> RtClassRequirement:
    for c in RT_CLASSES:
        if c.class_id == class_id:
            return c
    raise KeyError(class_id)

