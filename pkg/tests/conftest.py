"""Shared helpers: an independent brute-force aggregation oracle and trial generators."""

from __future__ import annotations

import contextlib
import random
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Set, Tuple, Union

import networkx as nx
import pytest

from hieragg.hierarchy import MembershipEvent
from hieragg.topology import Measurement

Event = Union[Measurement, MembershipEvent]


@dataclass
class FoldOracle:
    """Replays events with plain dicts and folds the hierarchy at the end.

    Groups that ever had a reporting member keep reporting (value 0 when
    emptied), mirroring a retained aggregate entry.
    """

    members: Dict[str, Set[str]] = field(default_factory=dict)
    latest: Dict[str, Tuple[float, int]] = field(default_factory=dict)
    reported: Set[str] = field(default_factory=set)
    graph: nx.DiGraph = field(default_factory=nx.DiGraph)
    rejected: int = 0
    late: int = 0

    def _has_value(self, node: str) -> bool:
        return node in self.latest or node in self.reported

    def _mark_up(self, node: str) -> None:
        stack = [node]
        while stack:
            n = stack.pop()
            if not self._has_value(n):
                continue
            for p in self.members.get(n, ()):
                if p not in self.reported:
                    self.reported.add(p)
                    stack.append(p)

    def feed(self, ev: Event) -> None:
        if isinstance(ev, MembershipEvent):
            new = set(ev.new_parents)
            old = self.members.get(ev.child, set())
            self.graph.remove_edges_from([(ev.child, p) for p in old])
            closes = ev.child in new or any(
                p in self.graph and ev.child in self.graph and nx.has_path(self.graph, p, ev.child) for p in new
            )
            if closes:
                self.graph.add_edges_from([(ev.child, p) for p in old])
                self.rejected += 1
                return
            self.graph.add_edges_from([(ev.child, p) for p in new])
            if new:
                self.members[ev.child] = new
            else:
                self.members.pop(ev.child, None)
            self._mark_up(ev.child)
        else:
            prev = self.latest.get(ev.sensor)
            if prev is not None and ev.timestamp < prev[1]:
                self.late += 1
                return
            self.latest[ev.sensor] = (ev.value, ev.timestamp)
            self._mark_up(ev.sensor)

    def fold(self) -> Dict[str, Tuple[float, int]]:
        children: Dict[str, List[str]] = {}
        for c, ps in self.members.items():
            for p in ps:
                children.setdefault(p, []).append(c)
        memo: Dict[str, float] = {}

        def value(node: str) -> float:
            if node in memo:
                return memo[node]
            if node in self.latest:
                v = self.latest[node][0]
            else:
                v = sum(value(c) for c in children.get(node, []) if self._has_value(c))
            memo[node] = v
            return v

        out = {}
        for g in self.reported:
            kids = [c for c in children.get(g, []) if self._has_value(c)]
            out[g] = (sum(value(c) for c in kids), len(kids))
        return out


def rel_close(a: float, b: float, rel: float = 1e-9) -> bool:
    if a == b:
        return True
    return abs(a - b) <= rel * max(abs(a), abs(b))


@dataclass
class Trial:
    events: List[Event]
    leaves: List[str]
    groups: List[str]


def make_trial(rng: random.Random, max_nodes: int = 100, max_events: int = 2000) -> Trial:
    """Two overlapping hierarchies over shared sensors, then a mixed event stream.

    Nodes get levels (sensors 0, groups 1..4); ordinary membership changes
    only point upward, so depth stays <= 4. A few changes deliberately point
    a group at one of its descendants and must be rejected.
    """
    n_sensors = rng.randint(1, max(1, max_nodes // 2))
    budget = max_nodes - n_sensors
    levels: Dict[str, int] = {f"s{i}": 0 for i in range(n_sensors)}
    groups: List[str] = []
    for h in "AB":
        depth = rng.randint(1, 4)
        for lvl in range(1, depth + 1):
            for j in range(rng.randint(1, 3)):
                if budget <= 0:
                    break
                gid = f"{h}{lvl}.{j}"
                levels[gid] = lvl
                groups.append(gid)
                budget -= 1
    if not groups:
        levels["A1.0"] = 1
        groups.append("A1.0")
    by_level: Dict[int, List[str]] = {}
    for g in groups:
        by_level.setdefault(levels[g], []).append(g)
    nodes = sorted(levels)

    def upward_parents(node: str) -> Set[str]:
        higher = [g for g in groups if levels[g] > levels[node]]
        if not higher:
            return set()
        k = rng.choice([0, 1, 1, 1, 2, 2, 3])
        return set(rng.sample(higher, min(k, len(higher))))

    events: List[Event] = []
    current: Dict[str, Set[str]] = {}
    ts = 0
    for node in nodes:
        ps = upward_parents(node)
        if ps:
            events.append(MembershipEvent(node, frozenset(ps), ts))
            current[node] = ps
    n_events = rng.randint(1, max_events)
    sensors = [n for n in nodes if levels[n] == 0]

    def descendant_groups(g: str) -> List[str]:
        found, frontier = set(), [g]
        while frontier:
            x = frontier.pop()
            for c, ps in current.items():
                if x in ps and c not in found and levels[c] > 0:
                    found.add(c)
                    frontier.append(c)
        return sorted(found)

    for _ in range(n_events):
        ts += rng.randint(0, 3)
        r = rng.random()
        if r < 0.80:
            s = rng.choice(sensors)
            late = rng.random() < 0.02
            events.append(Measurement(s, round(rng.uniform(0, 100), 3), max(0, ts - 50) if late else ts))
        elif r < 0.97:
            node = rng.choice(nodes)
            ps = upward_parents(node)
            events.append(MembershipEvent(node, frozenset(ps), ts))
            if ps:
                current[node] = ps
            else:
                current.pop(node, None)
        else:
            # point a group at one of its own descendants: must be rejected
            g = rng.choice(groups)
            below = descendant_groups(g)
            if below:
                events.append(MembershipEvent(g, frozenset([rng.choice(below)]), ts))
    return Trial(events, sensors, groups)


@pytest.fixture
def oracle() -> FoldOracle:
    return FoldOracle()


# --- acceptance reporting ------------------------------------------------

ACCEPTANCE_LINES: List[str] = []


def report(criterion: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


@contextlib.contextmanager
def criterion(number: int, title: str) -> Iterator[Dict[str, str]]:
    """Report PASS/FAIL for one acceptance criterion; put details in the yielded dict."""
    info: Dict[str, str] = {}
    try:
        yield info
    except BaseException as exc:
        report(number, title, False, info.get("detail") or f"{type(exc).__name__}: {exc}"[:300])
        raise
    report(number, title, True, info.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
