"""Hierarchical aggregation dataflow.

Seven steps, each keyed so that it can run partitioned:

1. sources: the measurement stream (keyed by sensor) and the membership
   table (child -> parent groups)
2. merge the measurement stream with converted aggregation results
3. two-sided inner join of last measurement and parent set per child
4. duplicate each join result to one record per parent group, with
   tombstones for groups the child left
5. last-value table keyed ``(child, group)``
6. group by group id and aggregate with add/subtract
7. publish results; every result is also converted back into a
   measurement of the group and fed to step 2

Per-key serial processing: stages 2-4 are keyed by child, 5-6 by group.
:class:`AggregationTask` holds the state of every stage for one partition
and is what the simulated runtime schedules. :class:`Topology` wires a set
of tasks together in-process for direct use and testing.
"""

from __future__ import annotations

import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

from .hierarchy import CycleError, MembershipEvent, MembershipTable
from .model import (
    TOMBSTONE,
    Aggregator,
    ChangeKind,
    ChangelogEvent,
    Record,
    Table,
    TableTableJoin,
    partition_for,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class Measurement:
    sensor: str
    value: float
    timestamp: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise ValueError(f"measurement value for {self.sensor!r} must be finite, got {self.value!r}")


@dataclass(frozen=True, slots=True)
class AggregationResult:
    group: str
    sum: float
    count: int
    timestamp: int


@dataclass(frozen=True)
class AggregateFunction:
    """An add/subtract pair over accumulators whose first two fields are ``(sum, count)``."""

    name: str
    initializer: Tuple[Any, ...]
    add: Callable[[Tuple[Any, ...], float], Tuple[Any, ...]]
    subtract: Callable[[Tuple[Any, ...], float], Tuple[Any, ...]]


def _grow(partials: Tuple[float, ...], x: float) -> Tuple[float, ...]:
    # Shewchuk's non-overlapping partials: their exact sum is the exact running total.
    if len(partials) == 1:
        y = partials[0]
        hi = x + y
        lo = (y - (hi - x)) if abs(x) >= abs(y) else (x - (hi - y))
        return (lo, hi) if lo else (hi,)
    out = []
    for y in partials:
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo:
            out.append(lo)
        x = hi
    out.append(x)
    return tuple(out)


def _sum_add(acc: Tuple[Any, ...], v: float) -> Tuple[Any, ...]:
    partials = _grow(acc[2], v)
    return math.fsum(partials), acc[1] + 1, partials


def _sum_subtract(acc: Tuple[Any, ...], v: float) -> Tuple[Any, ...]:
    count = acc[1] - 1
    if count == 0:
        return 0.0, 0, ()
    partials = _grow(acc[2], -v)
    return math.fsum(partials), count, partials


SUM = AggregateFunction("sum", (0.0, 0, ()), _sum_add, _sum_subtract)

AGGREGATES: Dict[str, AggregateFunction] = {"sum": SUM}


class UnsupportedAggregateError(ValueError):
    pass


class FeedbackLimitError(RuntimeError):
    """Raised when feedback keeps recirculating, i.e. the hierarchy has a cycle."""


def resolve_aggregate(agg_config: Union[str, AggregateFunction]) -> AggregateFunction:
    if isinstance(agg_config, AggregateFunction):
        return agg_config
    try:
        return AGGREGATES[agg_config]
    except KeyError:
        raise UnsupportedAggregateError(
            f"unsupported aggregate {agg_config!r}; supported: {sorted(AGGREGATES)}"
        ) from None


# --- individual steps ----------------------------------------------------


class DuplicationState:
    """Parent set used for each child's previous emission."""

    __slots__ = ("previous",)

    def __init__(self) -> None:
        self.previous: Dict[str, FrozenSet[str]] = {}

    def get(self, child: str) -> FrozenSet[str]:
        return self.previous.get(child, frozenset())


def duplicate_for_parents(
    state: DuplicationState,
    child: str,
    meas: Optional[Measurement],
    parents: FrozenSet[str],
    timestamp: Optional[int] = None,
) -> List[Record]:
    """Fan a joined measurement out to one ``(child, group)`` record per parent.

    Groups present in the previous emission but missing from ``parents``
    get a tombstone. ``meas`` may be ``None`` only when ``parents`` is
    empty (the join entry was deleted).
    """
    ts = timestamp if timestamp is not None else (meas.timestamp if meas is not None else 0)
    prev = state.previous.get(child, frozenset())
    out = [Record((child, g), meas.value, ts) for g in sorted(parents)]  # type: ignore[union-attr]
    for g in sorted(prev - parents):
        out.append(Record((child, g), TOMBSTONE, ts))
    if parents:
        state.previous[child] = parents
    else:
        state.previous.pop(child, None)
    return out


def update_last_value(table: Table, rec: Record) -> Optional[ChangelogEvent]:
    """Upsert a duplicated record, or delete its entry on a tombstone."""
    return table.apply(rec)


def convert_result(aggr: AggregationResult) -> Measurement:
    return Measurement(aggr.group, aggr.sum, aggr.timestamp)


# --- one partition of the dataflow ---------------------------------------


class AggregationTask:
    """State and processing for one partition of every stage.

    Methods return the records to be routed onward: ``on_measurement`` and
    ``on_membership`` yield records keyed ``(child, group)`` for the
    aggregation stage, which is partitioned by group; ``on_duplicate``
    yields output records keyed by group.
    """

    def __init__(self, partition: int = 0, aggregate: AggregateFunction = SUM, record_changelog: bool = True) -> None:
        self.partition = partition
        self.aggregate = aggregate
        self.join = TableTableJoin(record_changelog=record_changelog)
        self.duplication = DuplicationState()
        self.last_values = Table(record_changelog=record_changelog)
        self.aggregator = Aggregator(aggregate.initializer, aggregate.add, aggregate.subtract, record_changelog)
        self.result_ts: Dict[str, int] = {}
        self.late_rejected = 0
        self.accepted = 0

    # steps 2-4, keyed by child
    def on_measurement(self, meas: Measurement, external: bool = True) -> List[Record]:
        prev = self.join.left.entries.get(meas.sensor)
        if external and prev is not None and meas.timestamp < prev.timestamp:
            self.late_rejected += 1
            return []
        if external:
            self.accepted += 1
        ev = self.join.set_left(meas.sensor, meas, meas.timestamp)
        return self._duplicate(ev, meas.sensor, meas.timestamp)

    def on_membership(self, child: str, parents: FrozenSet[str], timestamp: int) -> List[Record]:
        value = parents if parents else TOMBSTONE
        ev = self.join.set_right(child, value, timestamp)
        return self._duplicate(ev, child, timestamp)

    def _duplicate(self, ev: Optional[ChangelogEvent], child: str, ts: int) -> List[Record]:
        if ev is None:
            return []
        if ev.kind is ChangeKind.DELETE:
            return duplicate_for_parents(self.duplication, child, None, frozenset(), ts)
        meas, parents = ev.new_value
        return duplicate_for_parents(self.duplication, child, meas, parents, ts)

    # steps 5-6, keyed by group
    def on_duplicate(self, rec: Record) -> List[Record]:
        ev = update_last_value(self.last_values, rec)
        if ev is None:
            return []
        group = rec.key[1]
        changed = self.aggregator.apply(group, ev)
        s, c = changed.new_value[:2]
        self.result_ts[group] = rec.timestamp
        return [Record(group, AggregationResult(group, s, c, rec.timestamp), rec.timestamp)]

    def snapshot(self) -> Tuple[Any, ...]:
        return (
            self.join.left.snapshot(),
            self.join.right.snapshot(),
            self.join.result.snapshot(),
            dict(self.duplication.previous),
            self.last_values.snapshot(),
            self.aggregator.table.snapshot(),
            dict(self.result_ts),
        )

    def restore(self, snap: Tuple[Any, ...]) -> None:
        left, right, result, dup, lv, agg, rts = snap
        self.join.left.restore(left)
        self.join.right.restore(right)
        self.join.result.restore(result)
        self.duplication.previous = dict(dup)
        self.last_values.restore(lv)
        self.aggregator.table.restore(agg)
        self.result_ts = dict(rts)

    def aggregates(self) -> Dict[str, AggregationResult]:
        out = {}
        for g, (s, c, *_rest) in self.aggregator.table.entries.items():
            out[g] = AggregationResult(g, s, c, self.result_ts.get(g, 0))
        return out


# --- graph description ---------------------------------------------------

# (step number, step name, graph nodes belonging to it)
PROCESSING_STEPS: Tuple[Tuple[int, str, Tuple[str, ...]], ...] = (
    (1, "data sources", ("input", "memberships")),
    (2, "merge", ("convert", "merge")),
    (3, "join", ("join",)),
    (4, "duplicate", ("duplicate",)),
    (5, "last value table", ("last_value",)),
    (6, "group and aggregate", ("aggregate",)),
    (7, "output", ("output",)),
)

EDGES: Tuple[Tuple[str, str], ...] = (
    ("input", "merge"),
    ("merge", "join"),
    ("memberships", "join"),
    ("join", "duplicate"),
    ("duplicate", "last_value"),
    ("last_value", "aggregate"),
    ("aggregate", "output"),
    ("output", "convert"),
    ("convert", "merge"),
)

FEEDBACK_EDGE = ("output", "convert")


# --- in-process driver ---------------------------------------------------

# queue item kinds
_MEAS, _FEEDBACK, _MEMBER, _DUP = range(4)


class Topology:
    """Executable dataflow with ``num_partitions`` in-process tasks.

    Events are processed to quiescence one at a time, so feedback from one
    event is fully drained before the next is read. Operator tables keep
    their changelogs only when ``record_changelog`` is set.
    """

    def __init__(
        self,
        aggregate: AggregateFunction = SUM,
        num_partitions: int = 1,
        seed: int = 0,
        max_feedback: int = 100_000,
        validate_memberships: bool = True,
        record_changelog: bool = False,
    ) -> None:
        self.aggregate = aggregate
        self.num_partitions = num_partitions
        self.seed = seed
        self.max_feedback = max_feedback
        self.validate_memberships = validate_memberships
        self.tasks = [AggregationTask(p, aggregate, record_changelog) for p in range(num_partitions)]
        self.hierarchy = MembershipTable()
        self.outputs: List[AggregationResult] = []
        self.rejected_memberships: List[Tuple[MembershipEvent, CycleError]] = []
        self._queue: Deque[Tuple[int, int, Any]] = deque()

    @property
    def nodes(self) -> List[str]:
        return [n for _, _, nodes in PROCESSING_STEPS for n in nodes]

    @property
    def edges(self) -> Tuple[Tuple[str, str], ...]:
        return EDGES

    @property
    def metrics(self) -> Counter:
        return Counter(
            accepted=sum(t.accepted for t in self.tasks),
            late_rejected=sum(t.late_rejected for t in self.tasks),
            rejected_memberships=len(self.rejected_memberships),
            outputs=len(self.outputs),
        )

    def _part(self, key: str) -> int:
        return partition_for(key, self.num_partitions, self.seed)

    def submit_measurement(self, meas: Measurement) -> None:
        self._queue.append((_MEAS, self._part(meas.sensor), meas))

    def submit_membership(self, ev: MembershipEvent) -> None:
        """Queue a membership change; raises :class:`CycleError` if it closes a cycle."""
        if self.validate_memberships:
            self.hierarchy.apply(ev)
        self._queue.append((_MEMBER, self._part(ev.child), ev))

    def submit(self, event: Union[Measurement, MembershipEvent]) -> bool:
        """Queue any input event; cycle-creating membership changes are dropped.

        Returns ``False`` when the event was rejected.
        """
        if isinstance(event, MembershipEvent):
            try:
                self.submit_membership(event)
            except CycleError as exc:
                log.warning("rejected membership event for %s: %s", event.child, exc)
                self.rejected_memberships.append((event, exc))
                return False
        else:
            self.submit_measurement(event)
        return True

    def run(self) -> List[AggregationResult]:
        """Drain all queues, feedback included; returns results emitted meanwhile."""
        emitted: List[AggregationResult] = []
        q = self._queue
        tasks = self.tasks
        feedback = 0
        while q:
            kind, p, item = q.popleft()
            task = tasks[p]
            if kind == _DUP:
                for rec in task.on_duplicate(item):
                    res = rec.value
                    emitted.append(res)
                    feedback += 1
                    if feedback > self.max_feedback:
                        q.clear()
                        raise FeedbackLimitError(
                            f"more than {self.max_feedback} feedback records while draining; "
                            f"last result for group {res.group!r} (membership cycle?)"
                        )
                    q.append((_FEEDBACK, self._part(res.group), convert_result(res)))
                continue
            if kind == _MEAS:
                dups = task.on_measurement(item, external=True)
            elif kind == _FEEDBACK:
                dups = task.on_measurement(item, external=False)
            else:
                dups = task.on_membership(item.child, item.new_parents, item.timestamp)
            for rec in dups:
                q.append((_DUP, self._part(rec.key[1]), rec))
        self.outputs.extend(emitted)
        return emitted

    def aggregates(self) -> Dict[str, AggregationResult]:
        out: Dict[str, AggregationResult] = {}
        for t in self.tasks:
            out.update(t.aggregates())
        return out

    def last_values(self) -> Dict[Tuple[str, str], float]:
        out: Dict[Tuple[str, str], float] = {}
        for t in self.tasks:
            out.update(t.last_values.entries)
        return out

    def measurements(self) -> Dict[str, Measurement]:
        out: Dict[str, Measurement] = {}
        for t in self.tasks:
            out.update(t.join.left.entries)
        return out


def build_topology(agg_config: Union[str, AggregateFunction] = "sum", **kwargs: Any) -> Topology:
    return Topology(resolve_aggregate(agg_config), **kwargs)


@dataclass
class QuiescenceResult:
    outputs: List[AggregationResult]
    aggregates: Dict[str, AggregationResult]
    last_values: Dict[Tuple[str, str], float]
    rejected: List[MembershipEvent] = field(default_factory=list)


def process_to_quiescence(
    topology: Topology, events: Iterable[Union[Measurement, MembershipEvent]]
) -> QuiescenceResult:
    """Feed ``events`` in order, draining the dataflow after each one."""
    outputs: List[AggregationResult] = []
    rejected: List[MembershipEvent] = []
    for ev in events:
        if topology.submit(ev):
            outputs.extend(topology.run())
        else:
            rejected.append(ev)  # type: ignore[arg-type]
    return QuiescenceResult(outputs, topology.aggregates(), topology.last_values(), rejected)


# --- newline-delimited JSON formats ---------------------------------------


def parse_measurement(obj: Dict[str, Any]) -> Measurement:
    return Measurement(str(obj["sensor"]), float(obj["value"]), int(obj["ts"]))


def measurement_to_json(m: Measurement) -> Dict[str, Any]:
    return {"sensor": m.sensor, "value": m.value, "ts": m.timestamp}


def result_to_json(r: AggregationResult) -> Dict[str, Any]:
    return {"group": r.group, "sum": r.sum, "count": r.count, "ts": r.timestamp}


def parse_result(obj: Dict[str, Any]) -> AggregationResult:
    return AggregationResult(str(obj["group"]), float(obj["sum"]), int(obj["count"]), int(obj["ts"]))
