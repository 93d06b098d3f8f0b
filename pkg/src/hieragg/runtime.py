"""Deterministic discrete-event runtime for the aggregation dataflow.

The fabric simulated here is a partitioned log broker plus a consumer
group of worker instances:

* four co-partitioned topics: ``input`` (external measurements, keyed by
  sensor), ``memberships`` (keyed by child), ``repartition`` (duplicated
  records, partitioned by group) and ``output`` (aggregation results,
  keyed by group, read back as feedback)
* partition ``p`` of every topic belongs to task ``p``; a task runs on
  whichever instance owns ``p`` under range assignment
* time advances in fixed ticks; per tick each instance may consume
  ``capacity * tick / 1000`` external input records, oldest first among
  its partitions. Internal records (memberships, feedback, repartition)
  do not draw on capacity and are drained within the tick.
* offsets are committed every ``commit_interval_ms`` together with a
  snapshot of task state. A stopped instance loses everything after its
  last commit; its partitions restart from the committed offsets on the
  new owner, so records are redelivered (at-least-once).

Only external records are charged because group-keyed stages are
inherently hot: every leaf measurement updates the root group, so charging
internal records would bound total throughput by one partition.
"""

from __future__ import annotations

import heapq
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .hierarchy import CycleError, MembershipEvent, MembershipTable
from .model import Record, partition_for
from .topology import SUM, AggregateFunction, AggregationResult, AggregationTask, Measurement, convert_result

log = logging.getLogger(__name__)

INPUT = "input"
MEMBERSHIPS = "memberships"
REPARTITION = "repartition"
OUTPUT = "output"
TOPICS = (INPUT, MEMBERSHIPS, REPARTITION, OUTPUT)
_INTERNAL = (MEMBERSHIPS, OUTPUT, REPARTITION)

DEFAULT_CAPACITY = 5000.0


class ClusterConfigError(ValueError):
    pass


class PartitionedLog:
    """Append-only partitions with retention below a truncation point.

    Offsets are absolute; truncation only frees memory for records the
    consumer has committed past.
    """

    def __init__(self, topic: str, num_partitions: int) -> None:
        self.topic = topic
        self.partitions: List[List[Record]] = [[] for _ in range(num_partitions)]
        self.base: List[int] = [0] * num_partitions

    def __len__(self) -> int:
        return len(self.partitions)

    def append(self, p: int, rec: Record) -> int:
        part = self.partitions[p]
        part.append(rec)
        return self.base[p] + len(part) - 1

    def high_water_mark(self, p: int) -> int:
        return self.base[p] + len(self.partitions[p])

    def read(self, p: int, offset: int) -> Record:
        return self.partitions[p][offset - self.base[p]]

    def read_from(self, p: int, offset: int) -> List[Record]:
        return self.partitions[p][offset - self.base[p]:]

    def truncate(self, p: int, offset: int) -> None:
        drop = offset - self.base[p]
        if drop > 0:
            del self.partitions[p][:drop]
            self.base[p] = offset


class InstanceState(str, Enum):
    RUNNING = "running"
    STOPPED = "stopped"


@dataclass
class Instance:
    id: int
    capacity: float
    state: InstanceState = InstanceState.RUNNING
    partitions: List[int] = field(default_factory=list)
    credit: float = 0.0

    @property
    def running(self) -> bool:
        return self.state is InstanceState.RUNNING


@dataclass(frozen=True)
class LatencySample:
    t: float
    latency: float


@dataclass
class SecondStats:
    records_in: int = 0
    records_out: int = 0
    results: int = 0
    latency_sum: float = 0.0
    running_instances: int = 0

    @property
    def avg_latency_ms(self) -> Optional[float]:
        return self.latency_sum / self.results if self.results else None


@dataclass
class MetricsDelta:
    records_in: int = 0
    records_out: int = 0
    results: int = 0
    latency_samples: List[LatencySample] = field(default_factory=list)


def range_assignment(num_partitions: int, instance_ids: Sequence[int]) -> Dict[int, Optional[int]]:
    """Contiguous partition ranges over instances sorted by id.

    The first ``num_partitions % n`` instances take one extra partition.
    """
    ids = sorted(instance_ids)
    if not ids:
        return {p: None for p in range(num_partitions)}
    n = len(ids)
    size, extra = divmod(num_partitions, n)
    out: Dict[int, Optional[int]] = {}
    p = 0
    for i, iid in enumerate(ids):
        for _ in range(size + (1 if i < extra else 0)):
            out[p] = iid
            p += 1
    return out


class ClusterState:
    """Logs, instances, assignment and the virtual clock.

    Use :func:`create_cluster` to build one. All iteration orders are
    fixed so runs are reproducible bit for bit.
    """

    def __init__(
        self,
        num_partitions: int,
        capacities: Sequence[float],
        seed: int = 0,
        aggregate: AggregateFunction = SUM,
        tick_ms: int = 100,
        commit_interval_ms: int = 1000,
        rebalance_delay_ms: int = 1000,
        max_internal_rounds: int = 10_000,
        audit: bool = False,
    ) -> None:
        if num_partitions < 1:
            raise ClusterConfigError("num_partitions must be >= 1")
        if not capacities:
            raise ClusterConfigError("at least one instance is required")
        if any(c <= 0 for c in capacities):
            raise ClusterConfigError("instance capacity must be positive")
        if tick_ms <= 0 or commit_interval_ms <= 0 or rebalance_delay_ms < 0:
            raise ClusterConfigError("tick and commit interval must be positive, rebalance delay >= 0")
        self.num_partitions = num_partitions
        self.seed = seed
        self.tick_ms = tick_ms
        self.commit_interval_ms = commit_interval_ms
        self.rebalance_delay_ms = rebalance_delay_ms
        self.max_internal_rounds = max_internal_rounds
        self.logs: Dict[str, PartitionedLog] = {t: PartitionedLog(t, num_partitions) for t in TOPICS}
        self.instances: List[Instance] = [Instance(i, float(c)) for i, c in enumerate(capacities)]
        self.assignment: Dict[int, Optional[int]] = {}
        self.clock_ms = 0
        self.tasks = [AggregationTask(p, aggregate, record_changelog=False) for p in range(num_partitions)]
        self.position: Dict[str, List[int]] = {t: [0] * num_partitions for t in TOPICS}
        self.committed: Dict[str, List[int]] = {t: [0] * num_partitions for t in TOPICS}
        self._snapshots = [t.snapshot() for t in self.tasks]
        self._dirty: Set[int] = set()
        self.paused_until = [0] * num_partitions
        # highest input offset ever processed + 1; separates first deliveries from redeliveries
        self.input_reached = [0] * num_partitions
        self.hierarchy = MembershipTable()
        self.rejected_memberships: List[Tuple[MembershipEvent, CycleError]] = []
        self.per_second: Dict[int, SecondStats] = defaultdict(SecondStats)
        self.redelivered = 0
        self.rebalances = 0
        self.result_sink: Optional[Callable[[int, AggregationResult], None]] = None
        self.audit_log: Optional[List[Tuple[int, int, int]]] = [] if audit else None
        self._schedule: List[Tuple[int, int, str, int]] = []
        self._schedule_seq = 0
        self._input_pending: Set[int] = set()
        self._internal_pending: Set[int] = set()
        self._in_by_tick: Dict[int, int] = defaultdict(int)
        self._last_commit_ms = 0
        self._apply_assignment(range_assignment(num_partitions, [i.id for i in self.instances]), pause=False)

    # --- introspection ---------------------------------------------------

    @property
    def running_instances(self) -> List[Instance]:
        return [i for i in self.instances if i.running]

    def owner_of(self, p: int) -> Optional[int]:
        return self.assignment.get(p)

    def committed_offsets(self, instance_id: int) -> Dict[str, Dict[int, int]]:
        inst = self.instances[instance_id]
        return {t: {p: self.committed[t][p] for p in inst.partitions} for t in TOPICS}

    def backlog(self, topic: str = INPUT) -> int:
        log_ = self.logs[topic]
        return sum(log_.high_water_mark(p) - self.position[topic][p] for p in range(self.num_partitions))

    def redeliverable(self, topic: str, p: int) -> int:
        return self.logs[topic].high_water_mark(p) - self.committed[topic][p]

    def is_quiescent(self) -> bool:
        return all(self.backlog(t) == 0 for t in TOPICS)

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

    @property
    def late_rejected(self) -> int:
        return sum(t.late_rejected for t in self.tasks)

    # --- producing -------------------------------------------------------

    def _part(self, key: str) -> int:
        return partition_for(key, self.num_partitions, self.seed)

    def produce(self, measurements: Iterable[Measurement]) -> int:
        """Append external measurements to the input topic."""
        n = 0
        log_ = self.logs[INPUT]
        tick = self.tick_ms
        for m in measurements:
            p = self._part(m.sensor)
            log_.append(p, Record(m.sensor, m, m.timestamp))
            self._input_pending.add(p)
            self._in_by_tick[m.timestamp // tick] += 1
            self.per_second[m.timestamp // 1000].records_in += 1
            n += 1
        return n

    def produce_membership(self, ev: MembershipEvent) -> bool:
        """Validate against the global hierarchy and append; ``False`` if rejected."""
        try:
            self.hierarchy.apply(ev)
        except CycleError as exc:
            log.warning("rejected membership event for %s: %s", ev.child, exc)
            self.rejected_memberships.append((ev, exc))
            return False
        p = self._part(ev.child)
        self.logs[MEMBERSHIPS].append(p, Record(ev.child, ev, ev.timestamp))
        self._internal_pending.add(p)
        return True

    def load_hierarchy(self, table: MembershipTable, timestamp: int = 0) -> None:
        for ev in table.to_events(timestamp):
            self.produce_membership(ev)

    # --- membership of the consumer group --------------------------------

    def schedule(self, at_ms: int, action: str, count: int = 0) -> None:
        heapq.heappush(self._schedule, (at_ms, self._schedule_seq, action, count))
        self._schedule_seq += 1
        if at_ms <= self.clock_ms:
            self._run_due(self.clock_ms)

    def _run_due(self, now: int) -> None:
        while self._schedule and self._schedule[0][0] <= now:
            _, _, action, count = heapq.heappop(self._schedule)
            if action == "stop":
                self.stop_instances(count)
            elif action == "recover":
                self.recover_instances()
            else:  # pragma: no cover - schedule() is internal
                raise ValueError(action)

    def stop_instances(self, count: int) -> List[int]:
        """Stop the ``count`` highest-id running instances, then rebalance."""
        running = self.running_instances
        if count > len(running):
            raise ClusterConfigError(f"cannot stop {count} of {len(running)} running instances")
        if count <= 0:
            return []
        victims = sorted(running, key=lambda i: i.id)[-count:]
        for inst in victims:
            inst.state = InstanceState.STOPPED
            inst.credit = 0.0
            for p in inst.partitions:
                self._revert(p)
        self.rebalance()
        return [i.id for i in victims]

    def recover_instances(self) -> List[int]:
        revived = [i for i in self.instances if not i.running]
        for inst in revived:
            inst.state = InstanceState.RUNNING
            inst.credit = 0.0
        if revived:
            self.rebalance()
        return [i.id for i in revived]

    def _revert(self, p: int) -> None:
        # uncommitted progress is lost; the log keeps whatever was produced
        self.tasks[p].restore(self._snapshots[p])
        self._dirty.discard(p)
        for t in TOPICS:
            behind = self.position[t][p] - self.committed[t][p]
            if t == INPUT:
                self.redelivered += behind
            self.position[t][p] = self.committed[t][p]
            if behind:
                (self._input_pending if t == INPUT else self._internal_pending).add(p)

    def _commit(self, p: int) -> None:
        for t in TOPICS:
            off = self.position[t][p]
            self.committed[t][p] = off
            self.logs[t].truncate(p, off)
        if p in self._dirty:
            self._snapshots[p] = self.tasks[p].snapshot()
            self._dirty.discard(p)

    def rebalance(self) -> Dict[int, Optional[int]]:
        """Reassign partitions by range over running instances."""
        new = range_assignment(self.num_partitions, [i.id for i in self.running_instances])
        self._apply_assignment(new, pause=True)
        self.rebalances += 1
        return new

    def _apply_assignment(self, new: Dict[int, Optional[int]], pause: bool) -> None:
        for p, owner in new.items():
            old = self.assignment.get(p)
            if old == owner:
                continue
            if old is not None and self.instances[old].running:
                self._commit(p)  # clean hand-off
            if pause and owner is not None:
                self.paused_until[p] = self.clock_ms + self.rebalance_delay_ms
        self.assignment = dict(new)
        for inst in self.instances:
            inst.partitions = []
        for p in range(self.num_partitions):
            owner = self.assignment[p]
            if owner is not None:
                self.instances[owner].partitions.append(p)

    # --- processing ------------------------------------------------------

    def _can_process(self, p: int, now: int) -> bool:
        return self.assignment.get(p) is not None and self.paused_until[p] <= now

    def _emit_duplicates(self, recs: List[Record]) -> None:
        if not recs:
            return
        log_ = self.logs[REPARTITION]
        pend = self._internal_pending
        for rec in recs:
            q = self._part(rec.key[1])
            log_.append(q, rec)
            pend.add(q)

    def _consume_input(self, start: int, now: int) -> int:
        """External records for this tick; returns first-time deliveries."""
        if not self._input_pending:
            return 0
        log_ = self.logs[INPUT]
        pos = self.position[INPUT]
        by_owner: Dict[int, List[int]] = defaultdict(list)
        for p in sorted(self._input_pending):
            if pos[p] >= log_.high_water_mark(p):
                self._input_pending.discard(p)
                continue
            if self._can_process(p, start):
                by_owner[self.assignment[p]].append(p)  # type: ignore[index]
        fresh = 0
        budget_per_tick = None
        for iid in sorted(by_owner):
            inst = self.instances[iid]
            budget_per_tick = inst.capacity * self.tick_ms / 1000.0
            inst.credit += budget_per_tick
            heap: List[Tuple[int, int]] = []
            for p in by_owner[iid]:
                rec = log_.read(p, pos[p])
                if rec.timestamp < now:
                    heap.append((rec.timestamp, p))
            heapq.heapify(heap)
            while heap and inst.credit >= 1.0:
                _, p = heapq.heappop(heap)
                off = pos[p]
                rec = log_.read(p, off)
                task = self.tasks[p]
                if self.audit_log is not None:
                    self.audit_log.append((start, p, iid))
                self._emit_duplicates(task.on_measurement(rec.value, external=True))
                self._dirty.add(p)
                off += 1
                pos[p] = off
                inst.credit -= 1.0
                if off > self.input_reached[p]:
                    self.input_reached[p] = off
                    fresh += 1
                if off < log_.high_water_mark(p):
                    nxt = log_.read(p, off)
                    if nxt.timestamp < now:
                        heapq.heappush(heap, (nxt.timestamp, p))
                else:
                    self._input_pending.discard(p)
            if not heap:
                # nothing left to spend credit on; do not bank it
                inst.credit = min(inst.credit, 1.0)
        for inst in self.running_instances:
            if inst.id not in by_owner:
                inst.credit = 0.0
        return fresh

    def _drain_internal(self, start: int, now: int, stats: SecondStats) -> int:
        results = 0
        tasks = self.tasks
        logs = self.logs
        position = self.position
        part = self._part
        out_log = logs[OUTPUT]
        rounds = 0
        deferred: Set[int] = set()
        while self._internal_pending:
            rounds += 1
            if rounds > self.max_internal_rounds:
                raise RuntimeError("internal records did not drain; membership cycle?")
            batch = sorted(self._internal_pending)
            self._internal_pending = set()
            for p in batch:
                if not self._can_process(p, start):
                    deferred.add(p)
                    continue
                task = tasks[p]
                if self.audit_log is not None:
                    self.audit_log.append((start, p, self.assignment[p]))  # type: ignore[arg-type]
                touched = False
                # memberships
                mlog = logs[MEMBERSHIPS]
                off = position[MEMBERSHIPS][p]
                hwm = mlog.high_water_mark(p)
                if off < hwm:
                    for rec in mlog.read_from(p, off):
                        ev = rec.value
                        self._emit_duplicates(task.on_membership(ev.child, ev.new_parents, ev.timestamp))
                    position[MEMBERSHIPS][p] = hwm
                    touched = True
                # feedback: converted results of groups keyed to this partition
                off = position[OUTPUT][p]
                hwm = out_log.high_water_mark(p)
                if off < hwm:
                    for rec in out_log.read_from(p, off):
                        self._emit_duplicates(task.on_measurement(convert_result(rec.value), external=False))
                    position[OUTPUT][p] = hwm
                    touched = True
                # aggregation stage
                rlog = logs[REPARTITION]
                off = position[REPARTITION][p]
                hwm = rlog.high_water_mark(p)
                if off < hwm:
                    sink = self.result_sink
                    for rec in rlog.read_from(p, off):
                        for out in task.on_duplicate(rec):
                            q = part(out.key)
                            out_log.append(q, out)
                            self._internal_pending.add(q)
                            results += 1
                            stats.latency_sum += now - out.timestamp
                            if sink is not None:
                                sink(now, out.value)
                    position[REPARTITION][p] = hwm
                    touched = True
                if touched:
                    self._dirty.add(p)
        self._internal_pending = deferred
        stats.results += results
        return results

    def _tick(self) -> Tuple[int, int, Optional[LatencySample]]:
        start = self.clock_ms
        self._run_due(start)
        now = start + self.tick_ms
        stats = self.per_second[start // 1000]
        fresh = self._consume_input(start, now)
        stats.records_out += fresh
        before_n, before_sum = stats.results, stats.latency_sum
        results = self._drain_internal(start, now, stats)
        self.clock_ms = now
        if now - self._last_commit_ms >= self.commit_interval_ms:
            for inst in self.running_instances:
                for p in inst.partitions:
                    self._commit(p)
            self._last_commit_ms = now
        stats.running_instances = len(self.running_instances)
        sample = None
        if results:
            sample = LatencySample(now / 1000.0, (stats.latency_sum - before_sum) / (stats.results - before_n))
        return fresh, results, sample

    def advance(self, dt_ms: int) -> MetricsDelta:
        """Run whole ticks covering ``dt_ms`` of simulated time."""
        if dt_ms <= 0:
            raise ValueError("dt must be positive")
        delta = MetricsDelta()
        end = self.clock_ms + dt_ms
        while self.clock_ms < end:
            delta.records_in += self._in_by_tick.pop(self.clock_ms // self.tick_ms, 0)
            fresh, results, sample = self._tick()
            delta.records_out += fresh
            delta.results += results
            if sample is not None:
                delta.latency_samples.append(sample)
        return delta

    def drain(self, max_ms: int = 3_600_000) -> int:
        """Advance without new input until every topic is consumed."""
        start = self.clock_ms
        while not self.is_quiescent():
            if self.clock_ms - start >= max_ms:
                raise RuntimeError(f"cluster did not drain within {max_ms} ms")
            if not self.running_instances:
                raise RuntimeError("no running instances; cannot drain")
            self.advance(self.tick_ms)
        return self.clock_ms - start


def create_cluster(
    num_partitions: int, instance_specs: Sequence[float], seed: int = 0, **kwargs
) -> ClusterState:
    """Build a cluster whose instances start running with range assignment."""
    return ClusterState(num_partitions, instance_specs, seed, **kwargs)


def rebalance(cluster: ClusterState) -> ClusterState:
    cluster.rebalance()
    return cluster


def inject_failure(cluster: ClusterState, stop_count: int, at: float) -> ClusterState:
    """Stop the ``stop_count`` highest-id instances at simulated second ``at``."""
    cluster.schedule(int(round(at * 1000)), "stop", stop_count)
    return cluster


def recover(cluster: ClusterState, at: float) -> ClusterState:
    cluster.schedule(int(round(at * 1000)), "recover")
    return cluster


def advance(cluster: ClusterState, dt: int) -> MetricsDelta:
    return cluster.advance(dt)
