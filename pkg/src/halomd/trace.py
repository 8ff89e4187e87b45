"""
Per-rank, per-phase timing spans and their analysis.

Spans are kept in memory and written out once, as Chrome trace-event JSON
(a list of complete "X" events, one lane per rank). Engine-level phases
that are not owned by a simulated rank use the driver lane, rank -1.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
import time
from contextlib import ContextDecorator
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from .exceptions import ParseError, TraceError
from .util import PathLike, atomic_write_text

logger = logging.getLogger(__name__)

DRIVER_RANK = -1


class Phase(str, enum.Enum):
    """Stages of one MD step"""

    CLASSICAL_MD = "classical_md"
    GATHER_POSITIONS = "gather_positions"
    DD_BUILD = "dd_build"
    NEIGHBOR_BUILD = "neighbor_build"
    INFERENCE = "inference"
    GHOST_FORCE_ROUTE = "ghost_force_route"
    REDUCE_FORCES = "reduce_forces"
    INTEGRATE = "integrate"


def clock() -> float:
    """Monotonic clock in seconds, read at nanosecond resolution"""
    return time.perf_counter_ns() * 1e-9


@dataclass(frozen=True)
class Span:
    """A timed interval of one phase on one rank"""

    rank: int
    phase: Phase
    start: float
    end: float
    step: int = 0

    @property
    def seconds(self) -> float:
        """Duration"""
        return self.end - self.start


class StepTrace:
    """
    Append-only span sink, safe to share between rank workers

    >>> trace = StepTrace()
    >>> trace.record_span(0, Phase.INFERENCE, 1.0, 1.5)
    >>> len(trace), trace.spans[0].seconds
    (1, 0.5)
    """

    def __init__(self, spans: Optional[Iterable[Span]] = None) -> None:
        self._lock = threading.Lock()
        self._spans: List[Span] = list(spans or [])

    def __len__(self) -> int:
        return len(self._spans)

    def __repr__(self) -> str:
        return f"StepTrace({len(self)} spans)"

    @property
    def spans(self) -> List[Span]:
        """A snapshot of the recorded spans"""
        with self._lock:
            return list(self._spans)

    def record_span(self, rank: int, phase: Phase, start: float, end: float, step: int = 0) -> None:
        """Append one span; `end` may equal but not precede `start`"""
        if end < start:
            raise TraceError(f"span of {Phase(phase).value} on rank {rank} ends before it starts")
        span = Span(int(rank), Phase(phase), float(start), float(end), int(step))
        with self._lock:
            self._spans.append(span)

    def timed(self, rank: int, phase: Phase, step: int = 0) -> SpanTimer:
        """Context manager recording the span of its body"""
        return SpanTimer(self, rank, phase, step)

    def extend(self, other: StepTrace) -> None:
        """Append every span of `other`"""
        spans = other.spans
        with self._lock:
            self._spans.extend(spans)

    def to_frame(self) -> pd.DataFrame:
        """One row per span"""
        return pd.DataFrame(
            [(s.step, s.rank, s.phase.value, s.start, s.end, s.seconds) for s in self.spans],
            columns=["step", "rank", "phase", "start", "end", "seconds"],
        )


class SpanTimer(ContextDecorator):
    """Time the body of a `with` block into a `StepTrace`"""

    def __init__(self, trace: Optional[StepTrace], rank: int, phase: Phase, step: int = 0) -> None:
        self.trace = trace
        self.rank = rank
        self.phase = phase
        self.step = step
        self.start = 0.0
        self.interval = 0.0

    def __enter__(self) -> SpanTimer:
        self.start = clock()
        return self

    def __exit__(self, *_tb_args) -> None:
        end = clock()
        self.interval = end - self.start
        if self.trace is not None:
            self.trace.record_span(self.rank, self.phase, self.start, end, self.step)


def export_chrome_trace(trace: StepTrace, path: PathLike) -> None:
    """
    Write the spans as a Chrome trace-event array with microsecond
    timestamps relative to the earliest span; each rank gets its own lane.
    """
    spans = trace.spans
    origin = min((s.start for s in spans), default=0.0)
    events = [
        {
            "name": s.phase.value,
            "cat": "halomd",
            "ph": "X",
            "ts": (s.start - origin) * 1e6,
            "dur": s.seconds * 1e6,
            "pid": 0,
            "tid": s.rank,
            "args": {"step": s.step},
        }
        for s in spans
    ]
    atomic_write_text(path, json.dumps(events, indent=None))
    logger.debug("wrote %d trace events to %s", len(events), path)


def read_chrome_trace(path: PathLike) -> StepTrace:
    """Parse a file written by `export_chrome_trace` (times in seconds from the first span)"""
    with open(path, encoding="utf-8") as f:
        try:
            events = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"not a trace file: {e.msg}", e.lineno) from e
    if not isinstance(events, list):
        raise ParseError("trace must be a JSON array of events")
    trace = StepTrace()
    for event in events:
        if event.get("ph") != "X":
            continue
        try:
            start = event["ts"] * 1e-6
            trace.record_span(
                event["tid"], Phase(event["name"]), start, start + event["dur"] * 1e-6, event.get("args", {}).get("step", 0)
            )
        except (KeyError, ValueError) as e:
            raise ParseError(f"malformed trace event {event!r}") from e
    return trace


@dataclass
class PhaseSummary:
    """
    Phase fractions of wall time.

    `per_rank` has one row per (step, rank, phase) with the fraction of that
    rank's wall time in the step; `aggregate` totals each phase over all
    rank-steps; `barrier_wait` is the time each rank waits at the force
    reduction for the slowest inference of the step.
    """

    per_rank: pd.DataFrame
    aggregate: pd.DataFrame
    barrier_wait: pd.DataFrame


def inference_seconds(trace: StepTrace) -> pd.DataFrame:
    """Inference time per (step, rank), ranks without inference omitted"""
    df = trace.to_frame()
    df = df[(df["phase"] == Phase.INFERENCE.value) & (df["rank"] != DRIVER_RANK)]
    return df.groupby(["step", "rank"], as_index=False)["seconds"].sum()


def phase_summary(trace: StepTrace) -> PhaseSummary:
    """Phase fractions and barrier wait of a trace"""
    df = trace.to_frame()
    if df.empty:
        raise TraceError("cannot summarize an empty trace")
    wall = df.groupby(["step", "rank"]).agg(start=("start", "min"), end=("end", "max"))
    wall["wall"] = wall["end"] - wall["start"]
    per_rank = df.groupby(["step", "rank", "phase"], as_index=False)["seconds"].sum()
    per_rank = per_rank.join(wall["wall"], on=["step", "rank"])
    # a lone zero-length span counts as the whole of its empty wall time
    per_rank["fraction"] = (per_rank["seconds"] / per_rank["wall"]).where(per_rank["wall"] > 0, 1.0)

    aggregate = df.groupby("phase", as_index=False)["seconds"].sum()
    total = aggregate["seconds"].sum()
    aggregate["fraction"] = aggregate["seconds"] / total if total > 0 else 1.0 / len(aggregate)

    inference = inference_seconds(trace)
    waits = []
    for step, group in inference.groupby("step"):
        # same arithmetic as analysis.load_imbalance
        t = group["seconds"].to_numpy()
        for rank, wait in zip(group["rank"], t.max() - t):
            waits.append((step, rank, wait))
    barrier_wait = pd.DataFrame(waits, columns=["step", "rank", "wait"])
    return PhaseSummary(per_rank.drop(columns="wall"), aggregate, barrier_wait)


def parallel_step_seconds(trace: StepTrace) -> pd.Series:
    """
    Modeled step time: the driver's serial phases plus the slowest rank's
    own work, indexed by step. It matches a run whose ranks all executed
    concurrently, whatever the actual scheduling was.
    """
    df = trace.to_frame()
    if df.empty:
        return pd.Series(dtype=np.float64, name="seconds")
    driver = df[df["rank"] == DRIVER_RANK].groupby("step")["seconds"].sum()
    ranks = df[df["rank"] != DRIVER_RANK].groupby(["step", "rank"])["seconds"].sum()
    slowest = ranks.groupby(level="step").max() if len(ranks) else pd.Series(dtype=np.float64)
    total = driver.add(slowest, fill_value=0.0)
    total.name = "seconds"
    return total


def rank_work_seconds(trace: StepTrace) -> Dict[int, float]:
    """Total rank-local time per rank over the whole trace"""
    df = trace.to_frame()
    df = df[df["rank"] != DRIVER_RANK]
    return {int(k): float(v) for k, v in df.groupby("rank")["seconds"].sum().items()}
