"""Child to parent-group membership, across any number of hierarchies.

Identifiers are global: a sensor or group id means the same node in every
hierarchy it takes part in. Membership events are state-style, each one
carries the child's complete new parent set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Set, TextIO, Tuple, Union

from .model import ChangelogEvent


class HierarchyError(ValueError):
    """Base class for structural membership problems."""


class CycleError(HierarchyError):
    def __init__(self, cycle: List[str]) -> None:
        self.cycle = cycle
        super().__init__("membership cycle: " + " -> ".join(cycle + cycle[:1]))


class DuplicateIdentifierError(HierarchyError):
    def __init__(self, identifier: str) -> None:
        self.identifier = identifier
        super().__init__(f"identifier {identifier!r} declared more than once")


@dataclass(frozen=True)
class MembershipSet:
    child: str
    parents: FrozenSet[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "parents", frozenset(self.parents))
        if self.child in self.parents:
            raise CycleError([self.child])


@dataclass(frozen=True)
class MembershipEvent:
    child: str
    new_parents: FrozenSet[str] = frozenset()
    timestamp: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "new_parents", frozenset(self.new_parents))
        if not isinstance(self.child, str) or not self.child:
            raise HierarchyError(f"malformed child identifier {self.child!r}")


class MembershipTable:
    """Mapping child id -> frozenset of parent group ids.

    The induced child->parent graph is kept acyclic: :meth:`apply` refuses
    events that would close a cycle and leaves the table untouched.
    """

    def __init__(self, entries: Optional[Dict[str, Iterable[str]]] = None) -> None:
        self.entries: Dict[str, FrozenSet[str]] = {}
        for child, parents in (entries or {}).items():
            self.entries[child] = frozenset(parents)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, child: str) -> bool:
        return child in self.entries

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MembershipTable):
            return NotImplemented
        return self.entries == other.entries

    def copy(self) -> "MembershipTable":
        t = MembershipTable()
        t.entries = dict(self.entries)
        return t

    def parents_of(self, identifier: str) -> FrozenSet[str]:
        return self.entries.get(identifier, frozenset())

    def children_of(self, group: str) -> Set[str]:
        return {c for c, ps in self.entries.items() if group in ps}

    def nodes(self) -> Set[str]:
        out = set(self.entries)
        for ps in self.entries.values():
            out |= ps
        return out

    def groups(self) -> Set[str]:
        out: Set[str] = set()
        for ps in self.entries.values():
            out |= ps
        return out

    def leaves(self) -> List[str]:
        """Children that are never a parent, sorted."""
        groups = self.groups()
        return sorted(c for c in self.entries if c not in groups)

    def _path_to(self, start: str, target: str) -> Optional[List[str]]:
        # Walk parent edges from start looking for target.
        stack = [(start, [start])]
        seen = set()
        while stack:
            node, path = stack.pop()
            if node == target:
                return path
            if node in seen:
                continue
            seen.add(node)
            for p in sorted(self.entries.get(node, ()), reverse=True):
                stack.append((p, path + [p]))
        return None

    def check_event(self, ev: MembershipEvent) -> None:
        """Raise :class:`CycleError` if applying ``ev`` would create a cycle."""
        if ev.child in ev.new_parents:
            raise CycleError([ev.child])
        for p in sorted(ev.new_parents):
            path = self._path_to(p, ev.child)
            if path is not None:
                # path is p .. child; the new edge child -> p closes it
                raise CycleError([ev.child] + path[:-1])

    def apply(self, ev: MembershipEvent) -> Optional[ChangelogEvent]:
        """Apply one event; returns the changelog event, or ``None`` for a no-op delete."""
        self.check_event(ev)
        old = self.entries.get(ev.child)
        if not ev.new_parents:
            if old is None:
                return None
            del self.entries[ev.child]
            return ChangelogEvent.delete(ev.child, old, ev.timestamp)
        self.entries[ev.child] = ev.new_parents
        if old is None:
            return ChangelogEvent.insert(ev.child, ev.new_parents, ev.timestamp)
        return ChangelogEvent.update(ev.child, old, ev.new_parents, ev.timestamp)

    def depth(self) -> int:
        """Length of the longest child->parent chain (0 for an empty table)."""
        memo: Dict[str, int] = {}

        def up(node: str) -> int:
            if node not in memo:
                ps = self.entries.get(node, ())
                memo[node] = 1 + max((up(p) for p in ps), default=0) if ps else 0
            return memo[node]

        return max((up(c) for c in self.entries), default=0)

    def to_events(self, timestamp: int = 0) -> List[MembershipEvent]:
        return [MembershipEvent(c, ps, timestamp) for c, ps in sorted(self.entries.items())]


def apply_membership_event(
    table: MembershipTable, ev: MembershipEvent
) -> Tuple[MembershipTable, Optional[ChangelogEvent]]:
    """Functional wrapper: returns an updated copy and the changelog event."""
    new = table.copy()
    change = new.apply(ev)
    return new, change


def parents_of(table: MembershipTable, identifier: str) -> FrozenSet[str]:
    return table.parents_of(identifier)


def find_cycle(entries: Dict[str, FrozenSet[str]]) -> Optional[List[str]]:
    """Return the node ids of one cycle in the child->parent graph, if any."""
    WHITE, GREY, BLACK = 0, 1, 2
    colour: Dict[str, int] = {}
    for root in sorted(entries):
        if colour.get(root, WHITE) != WHITE:
            continue
        stack: List[Tuple[str, Iterator[str]]] = [(root, iter(sorted(entries.get(root, ()))))]
        path = [root]
        colour[root] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = BLACK
                stack.pop()
                path.pop()
                continue
            c = colour.get(nxt, WHITE)
            if c == GREY:
                return path[path.index(nxt):]
            if c == WHITE:
                colour[nxt] = GREY
                path.append(nxt)
                stack.append((nxt, iter(sorted(entries.get(nxt, ())))))
    return None


def validate(table: Union[MembershipTable, Iterable[MembershipSet]]) -> None:
    """Raise a :class:`HierarchyError` unless the hierarchy is well formed.

    Accepts either a table or the raw list of declarations (as read from a
    hierarchy file), where a child declared twice is an identifier
    collision.
    """
    if isinstance(table, MembershipTable):
        entries = table.entries
    else:
        entries = {}
        for ms in table:
            if ms.child in entries:
                raise DuplicateIdentifierError(ms.child)
            entries[ms.child] = ms.parents
    for child, ps in entries.items():
        if child in ps:
            raise CycleError([child])
    cycle = find_cycle(entries)
    if cycle is not None:
        raise CycleError(cycle)


def leaf_id(index: int) -> str:
    return f"s{index}"


def group_id(level: int, index: int) -> str:
    return f"g{level}.{index}"


def build_nested_hierarchy(fan_out: int, depth: int) -> MembershipTable:
    """Complete ``fan_out``-ary tree with ``fan_out ** depth`` leaf sensors.

    Groups are named ``g<level>.<index>`` with the root at level 0 and
    sensors ``s<index>``.
    """
    if fan_out < 1 or depth < 1:
        raise ValueError("fan_out and depth must be >= 1")
    table = MembershipTable()
    for level in range(1, depth):
        for i in range(fan_out**level):
            table.entries[group_id(level, i)] = frozenset([group_id(level - 1, i // fan_out)])
    for i in range(fan_out**depth):
        table.entries[leaf_id(i)] = frozenset([group_id(depth - 1, i // fan_out)])
    return table


# --- newline-delimited JSON file format ---------------------------------


def parse_membership_line(line: str) -> MembershipEvent:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise HierarchyError(f"malformed membership line {line.strip()!r}: {exc}") from None
    if not isinstance(obj, dict) or "child" not in obj or "parents" not in obj:
        raise HierarchyError(f"expected an object with 'child' and 'parents': {line.strip()!r}")
    parents = obj["parents"]
    if not isinstance(parents, list) or not all(isinstance(p, str) for p in parents):
        raise HierarchyError(f"'parents' must be an array of strings: {line.strip()!r}")
    return MembershipEvent(str(obj["child"]), frozenset(parents), int(obj.get("ts", 0)))


def read_membership_events(fh: TextIO) -> List[MembershipEvent]:
    return [parse_membership_line(line) for line in fh if line.strip()]


def read_hierarchy(fh: TextIO) -> MembershipTable:
    """Read a hierarchy file, validating it as a whole."""
    events = read_membership_events(fh)
    validate([MembershipSet(ev.child, ev.new_parents) for ev in events])
    return MembershipTable({ev.child: ev.new_parents for ev in events})


def write_hierarchy(table: MembershipTable, fh: TextIO) -> None:
    for child, ps in sorted(table.entries.items()):
        fh.write(json.dumps({"child": child, "parents": sorted(ps)}) + "\n")


def format_membership_event(ev: MembershipEvent) -> str:
    return json.dumps({"child": ev.child, "parents": sorted(ev.new_parents), "ts": ev.timestamp})
