"""Dual-streaming primitives.

A stream is an append-only sequence of immutable, keyed, timestamped
records. A table is the latest-value-per-key view of a changelog
stream; every mutation of a :class:`Table` yields a
:class:`ChangelogEvent`, so a table can always be replayed from its own
changelog.

The operators here are deliberately small and generic: the aggregation
topology in :mod:`hieragg.topology` is composed from them.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Any, Callable, Dict, Hashable, Iterable, Iterator, List, Optional, Tuple, Union

Key = Union[str, Tuple[str, str]]


class _TombstoneType:
    """Marker payload requesting deletion of a downstream table entry."""

    _instance: Optional["_TombstoneType"] = None

    def __new__(cls) -> "_TombstoneType":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "TOMBSTONE"

    def __reduce__(self):
        return (_TombstoneType, ())


TOMBSTONE = _TombstoneType()


def is_tombstone(value: Any) -> bool:
    return value is TOMBSTONE


@dataclass(frozen=True, slots=True)
class Record:
    key: Key
    value: Any
    timestamp: int

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValueError(f"record timestamp must be >= 0, got {self.timestamp}")


class ChangeKind(str, Enum):
    INSERT = "insert"
    UPDATE = "update"
    DELETE = "delete"


_ABSENT = object()


@dataclass(frozen=True, slots=True)
class ChangelogEvent:
    """One table mutation.

    ``old_value`` is ``None`` for inserts and ``new_value`` is ``None`` for
    deletes. ``timestamp`` is the time of the record that caused the change.
    """

    kind: ChangeKind
    key: Key
    new_value: Any = None
    old_value: Any = None
    timestamp: int = 0

    @classmethod
    def insert(cls, key: Key, new: Any, timestamp: int = 0) -> "ChangelogEvent":
        return cls(ChangeKind.INSERT, key, new, None, timestamp)

    @classmethod
    def update(cls, key: Key, old: Any, new: Any, timestamp: int = 0) -> "ChangelogEvent":
        return cls(ChangeKind.UPDATE, key, new, old, timestamp)

    @classmethod
    def delete(cls, key: Key, old: Any, timestamp: int = 0) -> "ChangelogEvent":
        return cls(ChangeKind.DELETE, key, None, old, timestamp)


class Table:
    """Materialized latest-value-per-key view.

    Parameters
    ----------
    record_changelog:
        Keep every emitted :class:`ChangelogEvent` in :attr:`changelog`.
        Long-running simulations switch this off; the events are still
        returned to the caller.
    """

    __slots__ = ("entries", "changelog", "_record")

    def __init__(self, record_changelog: bool = True) -> None:
        self.entries: Dict[Key, Any] = {}
        self.changelog: List[ChangelogEvent] = []
        self._record = record_changelog

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: Key) -> bool:
        return key in self.entries

    def get(self, key: Key, default: Any = None) -> Any:
        return self.entries.get(key, default)

    def upsert(self, key: Key, value: Any, timestamp: int = 0) -> ChangelogEvent:
        if value is TOMBSTONE:
            raise ValueError("tombstones delete entries, they cannot be stored")
        old = self.entries.get(key, _ABSENT)
        self.entries[key] = value
        if old is _ABSENT:
            ev = ChangelogEvent(ChangeKind.INSERT, key, value, None, timestamp)
        else:
            ev = ChangelogEvent(ChangeKind.UPDATE, key, value, old, timestamp)
        if self._record:
            self.changelog.append(ev)
        return ev

    def delete(self, key: Key, timestamp: int = 0) -> Optional[ChangelogEvent]:
        """Remove ``key``; returns ``None`` when there was nothing to delete."""
        old = self.entries.pop(key, _ABSENT)
        if old is _ABSENT:
            return None
        ev = ChangelogEvent(ChangeKind.DELETE, key, None, old, timestamp)
        if self._record:
            self.changelog.append(ev)
        return ev

    def apply(self, rec: Record) -> Optional[ChangelogEvent]:
        """Upsert a record, or delete its key when the payload is a tombstone."""
        if rec.value is TOMBSTONE:
            return self.delete(rec.key, rec.timestamp)
        return self.upsert(rec.key, rec.value, rec.timestamp)

    def snapshot(self) -> Dict[Key, Any]:
        return dict(self.entries)

    def restore(self, entries: Dict[Key, Any]) -> None:
        self.entries = dict(entries)

    @staticmethod
    def replay(changelog: Iterable[ChangelogEvent]) -> Dict[Key, Any]:
        entries: Dict[Key, Any] = {}
        for ev in changelog:
            if ev.kind is ChangeKind.DELETE:
                del entries[ev.key]
            else:
                entries[ev.key] = ev.new_value
        return entries


@dataclass
class OperatorState:
    """Per-key state owned by one partition of a stateful operator."""

    partition: int
    values: Dict[Hashable, Any]

    def __init__(self, partition: int = 0) -> None:
        self.partition = partition
        self.values = {}


def _key_bytes(key: Key) -> bytes:
    if isinstance(key, tuple):
        return "\x1f".join(key).encode("utf-8")
    return key.encode("utf-8")


@lru_cache(maxsize=1 << 18)
def partition_for(key: Key, num_partitions: int, seed: int = 0) -> int:
    """Map ``key`` to a partition in ``[0, num_partitions)``.

    BLAKE2b over the UTF-8 key, salted with ``seed``. Stable across
    processes (unlike the builtin ``hash``).
    """
    if num_partitions < 1:
        raise ValueError("num_partitions must be >= 1")
    if num_partitions == 1:
        return 0
    h = hashlib.blake2b(_key_bytes(key), digest_size=8, salt=seed.to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little") % num_partitions


def merge(a: Iterable[Record], b: Iterable[Record]) -> Iterator[Record]:
    """Interleave two record streams by timestamp.

    Each input's own order is kept as-is, so per-key order survives even
    for inputs that are not timestamp sorted.
    """
    return heapq.merge(a, b, key=lambda r: r.timestamp)


def map_stream(stream: Iterable[Record], fn: Callable[[Record], Record]) -> Iterator[Record]:
    return (fn(r) for r in stream)


def flat_transform(
    stream: Iterable[Record],
    fn: Callable[[OperatorState, Record], Iterable[Record]],
    state: Optional[OperatorState] = None,
) -> Iterator[Record]:
    """Stateful one-to-many operator; ``fn`` sees the shared partition state."""
    state = state if state is not None else OperatorState()
    for rec in stream:
        yield from fn(state, rec)


class TableTableJoin:
    """Two-sided inner join of two tables sharing a key space.

    Either side changing re-evaluates the joined entry for that key. The
    joined value is ``(left, right)``; it exists only while both sides do.
    """

    def __init__(self, record_changelog: bool = True) -> None:
        self.left = Table(record_changelog=False)
        self.right = Table(record_changelog=False)
        self.result = Table(record_changelog=record_changelog)

    def _emit(self, key: Key, timestamp: int) -> Optional[ChangelogEvent]:
        lv = self.left.entries.get(key, _ABSENT)
        rv = self.right.entries.get(key, _ABSENT)
        if lv is _ABSENT or rv is _ABSENT:
            return self.result.delete(key, timestamp)
        return self.result.upsert(key, (lv, rv), timestamp)

    def on_left(self, rec: Record) -> Optional[ChangelogEvent]:
        return self.set_left(rec.key, rec.value, rec.timestamp)

    def on_right(self, rec: Record) -> Optional[ChangelogEvent]:
        return self.set_right(rec.key, rec.value, rec.timestamp)

    # side tables keep no changelog, so they are written directly
    def set_left(self, key: Key, value: Any, timestamp: int) -> Optional[ChangelogEvent]:
        if value is TOMBSTONE:
            self.left.entries.pop(key, None)
        else:
            self.left.entries[key] = value
        return self._emit(key, timestamp)

    def set_right(self, key: Key, value: Any, timestamp: int) -> Optional[ChangelogEvent]:
        if value is TOMBSTONE:
            self.right.entries.pop(key, None)
        else:
            self.right.entries[key] = value
        return self._emit(key, timestamp)


def join_stream_table(measurements: Table, memberships: Table) -> Table:
    """Inner join of a last-measurement table with a membership table."""
    out = Table()
    for key in sorted(measurements.entries.keys() & memberships.entries.keys(), key=_key_bytes):
        out.upsert(key, (measurements.entries[key], memberships.entries[key]))
    return out


def group_by(table: Table, key_extractor: Callable[[Key], Key]) -> Dict[Key, Dict[Key, Any]]:
    """Bucket table entries by ``key_extractor(key)``."""
    buckets: Dict[Key, Dict[Key, Any]] = {}
    for key, value in table.entries.items():
        buckets.setdefault(key_extractor(key), {})[key] = value
    return buckets


def regroup(ev: ChangelogEvent, key_extractor: Callable[[Key], Key]) -> Tuple[Key, ChangelogEvent]:
    """Route a changelog event to its group bucket."""
    return key_extractor(ev.key), ev


class Aggregator:
    """Incremental group aggregate driven by table changelog events.

    Updates run ``subtract(old)`` and then ``add(new)``; only the final
    accumulator is reported, never the subtracted intermediate.
    """

    def __init__(
        self,
        initializer: Any,
        add: Callable[[Any, Any], Any],
        subtract: Callable[[Any, Any], Any],
        record_changelog: bool = True,
    ) -> None:
        self.initializer = initializer
        self.add = add
        self.subtract = subtract
        self.table = Table(record_changelog=record_changelog)

    def apply(self, group: Key, ev: ChangelogEvent) -> ChangelogEvent:
        acc = self.table.entries.get(group, self.initializer)
        if ev.kind is ChangeKind.INSERT:
            acc = self.add(acc, ev.new_value)
        elif ev.kind is ChangeKind.UPDATE:
            acc = self.add(self.subtract(acc, ev.old_value), ev.new_value)
        else:
            acc = self.subtract(acc, ev.old_value)
        return self.table.upsert(group, acc, ev.timestamp)


def aggregate(
    grouped_events: Iterable[Tuple[Key, ChangelogEvent]],
    initializer: Any,
    add: Callable[[Any, Any], Any],
    subtract: Callable[[Any, Any], Any],
) -> Table:
    """Fold a sequence of ``(group, event)`` pairs into a table keyed by group."""
    agg = Aggregator(initializer, add, subtract)
    for group, ev in grouped_events:
        agg.apply(group, ev)
    return agg.table
