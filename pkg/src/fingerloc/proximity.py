"""Topological building model, walking distances, and proximity monitoring.

A building is an undirected weighted graph of per-cell center and transit
points.  The walking distance between two cells is the shortest path between
their center points, where interjacent cells may only be passed through
their transit points.  On top of the distance metric, dynamically centered
update zones (walking-distance spaces) let a server detect proximity or
separation of target pairs with few messages, within a borderline tolerance
band where detection is optional.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from fingerloc.core import InvariantViolation, ParseError, Trace

CENTER = "center"
TRANSIT = "transit"


@dataclass(frozen=True)
class GraphPoint:
    point_id: str
    kind: str
    cell: str


class BuildingGraph:
    """Connected graph of cell center/transit points with metric edge weights."""

    def __init__(self, points: Iterable[GraphPoint],
                 edges: Iterable[tuple[str, str, float]]):
        self.points: dict[str, GraphPoint] = {}
        self.adjacency: dict[str, dict[str, float]] = {}
        self.center_of: dict[str, str] = {}
        for p in points:
            if p.point_id in self.points:
                raise InvariantViolation(f"duplicate point {p.point_id!r}")
            if p.kind not in (CENTER, TRANSIT):
                raise InvariantViolation(f"point kind {p.kind!r} not center|transit")
            self.points[p.point_id] = p
            self.adjacency[p.point_id] = {}
            if p.kind == CENTER:
                if p.cell in self.center_of:
                    raise InvariantViolation(f"cell {p.cell!r} has two center points")
                self.center_of[p.cell] = p.point_id
        for a, b, w in edges:
            if a not in self.points or b not in self.points:
                raise InvariantViolation(f"edge {a!r}-{b!r} references unknown point")
            if w <= 0:
                raise InvariantViolation(f"edge {a!r}-{b!r} weight must be > 0")
            self.adjacency[a][b] = float(w)
            self.adjacency[b][a] = float(w)
        self._validate()
        self._table: dict[str, dict[str, float]] | None = None

    def _validate(self) -> None:
        for pid, p in self.points.items():
            if p.cell not in self.center_of:
                raise InvariantViolation(f"cell {p.cell!r} has no center point")
        by_cell: dict[str, list[str]] = {}
        for pid, p in self.points.items():
            by_cell.setdefault(p.cell, []).append(pid)
        for cell, pids in by_cell.items():
            for i, a in enumerate(pids):
                for b in pids[i + 1:]:
                    if b not in self.adjacency[a]:
                        raise InvariantViolation(
                            f"points {a!r} and {b!r} of cell {cell!r} are not "
                            "directly connected")
        seen = set()
        stack = [next(iter(self.points))]
        while stack:
            pid = stack.pop()
            if pid in seen:
                continue
            seen.add(pid)
            stack.extend(self.adjacency[pid])
        if len(seen) != len(self.points):
            raise InvariantViolation("building graph is not connected")

    @property
    def cells(self) -> list[str]:
        return sorted(self.center_of)

    def _distances_from(self, cell: str) -> dict[str, float]:
        # Dijkstra expanding transit points and the source center only; other
        # cells' centers can terminate a path but not be passed through.
        source = self.center_of[cell]
        dist = {source: 0.0}
        heap = [(0.0, source)]
        done: set[str] = set()
        while heap:
            d, pid = heapq.heappop(heap)
            if pid in done:
                continue
            done.add(pid)
            if self.points[pid].kind == CENTER and pid != source:
                continue
            for other, w in self.adjacency[pid].items():
                nd = d + w
                if nd < dist.get(other, math.inf):
                    dist[other] = nd
                    heapq.heappush(heap, (nd, other))
        out = {}
        for other_cell, center in self.center_of.items():
            if center in dist:
                out[other_cell] = dist[center]
        return out

    def distance_table(self) -> dict[str, dict[str, float]]:
        """All-pairs walking distances, computed once and cached."""
        if self._table is None:
            table = {cell: self._distances_from(cell) for cell in self.center_of}
            for a in table:
                for b in table:
                    if b not in table[a]:
                        raise InvariantViolation(
                            f"cells {a!r} and {b!r} are not mutually reachable")
            self._table = table
        return self._table


def walking_distance(graph: BuildingGraph, c1: str, c2: str) -> float:
    """Shortest center-to-center path passing other cells via transit points."""
    for c in (c1, c2):
        if c not in graph.center_of:
            raise KeyError(c)
    if c1 == c2:
        return 0.0
    return graph.distance_table()[c1][c2]


def wds(graph: BuildingGraph, cell: str, radius: float) -> set[str]:
    """Walking distance space: cells within ``radius`` of ``cell`` (inclusive)."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    row = graph.distance_table()[cell]
    return {c for c, d in row.items() if d <= radius}


# -- building-model files --------------------------------------------------------

def load_building_graph(path: str) -> BuildingGraph:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    points: list[GraphPoint] = []
    edges: list[tuple[str, str, float]] = []
    for i, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if parts[0] == "point" and len(parts) == 4:
            points.append(GraphPoint(parts[1], parts[2], parts[3]))
        elif parts[0] == "edge" and len(parts) == 4:
            try:
                edges.append((parts[1], parts[2], float(parts[3])))
            except ValueError:
                raise ParseError(f"bad edge weight {parts[3]!r}", i) from None
        else:
            raise ParseError("expected 'point <id> center|transit <cell>' or "
                             "'edge <id1> <id2> <meters>'", i)
    if not points:
        raise ParseError("building model has no points", len(lines) or 1)
    return BuildingGraph(points, edges)


def dump_building_graph(graph: BuildingGraph) -> str:
    lines = [f"point {pid} {p.kind} {p.cell}"
             for pid, p in sorted(graph.points.items())]
    seen = set()
    for a in sorted(graph.adjacency):
        for b, w in sorted(graph.adjacency[a].items()):
            if (b, a) not in seen:
                seen.add((a, b))
                lines.append(f"edge {a} {b} {repr(w)}")
    return "\n".join(lines) + "\n"


def save_building_graph(graph: BuildingGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_building_graph(graph))


# -- dynamically centered zones ---------------------------------------------------

@dataclass(frozen=True)
class DccRadius:
    """Assigned zone radius plus a flag requesting a poll of the counterpart."""

    radius: float
    must_poll: bool


def dcc_proximity_radius(d: float, r_j: float, d_p: float, b: float) -> DccRadius:
    """Zone radius keeping a pair from crossing the proximity distance.

    The raw radius is the slack ``d - r_j - d_p``; when non-positive the
    counterpart must be polled because proximity could already hold.  The
    assigned radius is floored at ``b/2``, the smallest zone worth
    configuring under borderline tolerance ``b``.
    """
    if min(d, r_j, d_p, b) < 0:
        raise ValueError("distances must be non-negative")
    raw = d - r_j - d_p
    return DccRadius(max(raw, b / 2.0), raw <= 0)


def dcc_separation_radius(d: float, r_j: float, d_s: float, b: float) -> DccRadius:
    """Zone radius keeping a pair from crossing the separation distance."""
    if min(d, r_j, d_s, b) < 0:
        raise ValueError("distances must be non-negative")
    raw = d_s - d - r_j
    return DccRadius(max(raw, b / 2.0), raw <= 0)


MUST = "must"
MAY = "may"
MUST_NOT = "must_not"


def proximity_check(d: float, d_p: float, b: float) -> str:
    """Detection obligation for a pair at walking distance ``d``.

    Within the borderline band ``[d_p, d_p + b]`` detection is optional.
    """
    if d_p <= 0 or b < 0:
        raise ValueError("d_p must be positive, b non-negative")
    if d < d_p:
        return MUST
    if d <= d_p + b:
        return MAY
    return MUST_NOT


def separation_check(d: float, d_s: float, b: float) -> str:
    """Detection obligation for separation; band is ``[d_s, d_s + b]``."""
    if d_s <= 0 or b < 0:
        raise ValueError("d_s must be positive, b non-negative")
    if d > d_s + b:
        return MUST
    if d >= d_s:
        return MAY
    return MUST_NOT


# -- monitor ----------------------------------------------------------------------

LocateFn = Callable[[int, object, str], str]


def _oracle_locate(target: int, sample, truth_cell: str) -> str:
    return truth_cell


@dataclass
class MonitorLog:
    """Messages and detection events from a monitoring run."""

    events: list[tuple[float, str, tuple[int, ...]]] = field(default_factory=list)
    updates: int = 0
    polls: int = 0
    configs: int = 0
    baseline: int = 0

    @property
    def messages(self) -> int:
        return self.updates + self.polls + self.configs


class _DccEngine:
    """DCC zone assignment over walking distances for one monitored relation.

    Zones keep the trigger condition unreachable while every target stays
    inside its zone; a zone exit causes an RSS update, a poll of counterparts
    whose zones are close enough that the trigger could hold, and fresh zone
    assignments.  Proximity triggers at measured distance <= d_p + b (inside
    the borderline band); separation triggers strictly above d_s so that the
    two buddy-service bands never fire at the same distance.
    """

    def __init__(self, graph: BuildingGraph, mode: str, threshold: float,
                 b: float, n_targets: int, log: MonitorLog):
        if mode not in ("proximity", "separation"):
            raise ValueError(f"unknown mode {mode!r}")
        if threshold <= 0:
            raise ValueError("detection distance must be positive")
        self.graph = graph
        self.table = graph.distance_table()
        self.mode = mode
        self.threshold = threshold
        self.b = b
        self.cells: list[str | None] = [None] * n_targets
        self.zones: list[set[str]] = [set() for _ in range(n_targets)]
        self.log = log

    def _zone_reach(self, cell: str, zone: set[str]) -> float:
        """Extreme distance to a zone: nearest cell for proximity, farthest
        for separation."""
        row = self.table[cell]
        distances = [row[c] for c in zone]
        return min(distances) if self.mode == "proximity" else max(distances)

    def _triggered(self, d: float) -> bool:
        if self.mode == "proximity":
            return d <= self.threshold + self.b
        return d > self.threshold

    def _poll_needed(self, reach: float) -> bool:
        if self.mode == "proximity":
            return reach - self.threshold < self.b
        return self.threshold - reach < self.b

    def _pair_radius(self, d: float) -> float:
        slack = d - self.threshold if self.mode == "proximity" else self.threshold - d
        return max(slack / 2.0, self.b / 2.0)

    def _reach_radius(self, reach: float) -> float:
        raw = reach - self.threshold if self.mode == "proximity" else self.threshold - reach
        return max(raw, self.b / 2.0)

    def _assign(self, i: int, radius: float) -> None:
        self.zones[i] = wds(self.graph, self.cells[i], radius)
        self.log.configs += 1

    def initialize(self, cells: Sequence[str]) -> tuple[int, int] | None:
        """Poll all targets; returns an immediately triggered pair, else
        assigns zones."""
        self.log.polls += len(cells)
        self.cells = list(cells)
        for i in range(len(cells)):
            for j in range(i + 1, len(cells)):
                if self._triggered(self.table[cells[i]][cells[j]]):
                    return (i, j)
        for i in range(len(cells)):
            radius = min(self._pair_radius(self.table[cells[i]][cells[j]])
                         for j in range(len(cells)) if j != i)
            self._assign(i, radius)
        return None

    def step(self, current_cells: Sequence[str]) -> tuple[int, int] | None:
        """Process one time step; returns the triggered pair, if any."""
        for i, cell in enumerate(current_cells):
            if cell in self.zones[i]:
                continue
            self.log.updates += 1
            self.cells[i] = cell
            polled = []
            for j in range(len(current_cells)):
                if j == i:
                    continue
                if self._poll_needed(self._zone_reach(cell, self.zones[j])):
                    polled.append(j)
                    self.log.polls += 1
                    self.cells[j] = current_cells[j]
            for j in polled:
                if self._triggered(self.table[cell][self.cells[j]]):
                    return tuple(sorted((i, j)))  # type: ignore[return-value]
            for idx in [i, *polled]:
                constraints = []
                for j in range(len(current_cells)):
                    if j == idx:
                        continue
                    if j in polled or j == i:
                        constraints.append(self._pair_radius(
                            self.table[self.cells[idx]][self.cells[j]]))
                    else:
                        constraints.append(self._reach_radius(
                            self._zone_reach(self.cells[idx], self.zones[j])))
                self._assign(idx, min(constraints))
        return None


def _aligned_samples(targets: Sequence[Trace]) -> list[tuple[float, list]]:
    if len(targets) < 2:
        raise ValueError("monitoring needs at least 2 targets")
    for t in targets:
        if not t.labeled:
            raise InvariantViolation("monitoring needs labeled traces")
    times = [tuple(s.timestamp for s in t.samples) for t in targets]
    if len(set(times)) != 1:
        raise InvariantViolation("target traces are not on the same timeline")
    return [(targets[0].samples[k].timestamp,
             [t.samples[k] for t in targets]) for k in range(len(times[0]))]


def _located_cells(targets: Sequence[Trace], samples: Sequence, ts: float,
                   locate_fn: LocateFn) -> list[str]:
    return [locate_fn(i, samples[i], targets[i].truth_at(ts))
            for i in range(len(targets))]


def dcc_monitor(graph: BuildingGraph, targets: Sequence[Trace], mode: str,
                threshold: float, b: float,
                locate_fn: LocateFn = _oracle_locate) -> MonitorLog:
    """Monitor the targets for one proximity or separation event.

    Replays the aligned traces through the DCC engine, logging all messages;
    monitoring stops at the first detection.  ``threshold`` is ``d_p`` for
    proximity and ``d_s`` for separation.
    """
    steps = _aligned_samples(targets)
    log = MonitorLog(baseline=len(steps) * len(targets))
    engine = _DccEngine(graph, mode, threshold, b, len(targets), log)
    done = False
    for k, (ts, samples) in enumerate(steps):
        cells = _located_cells(targets, samples, ts, locate_fn)
        pair = None
        if k == 0:
            pair = engine.initialize(cells)
        elif not done:
            pair = engine.step(cells)
        if pair is not None:
            log.events.append((ts, mode, pair))
            done = True
    return log


def buddy_service(graph: BuildingGraph, targets: Sequence[Trace], p: float,
                  b: float, locate_fn: LocateFn = _oracle_locate) -> MonitorLog:
    """Proximity-list community service over all target pairs.

    Each pair alternates between proximity detection with ``d_p = p - b``
    and separation detection with ``d_s = p``; the bands fire on disjoint
    distances, avoiding add/remove ping-pong.  Events are logged as
    ``add``/``remove`` list changes.
    """
    if p <= b:
        raise ValueError(f"need p > b, got p={p}, b={b}")
    steps = _aligned_samples(targets)
    log = MonitorLog(baseline=len(steps) * len(targets))
    pairs = [(i, j) for i in range(len(targets))
             for j in range(i + 1, len(targets))]
    engines: dict[tuple[int, int], _DccEngine | None] = {pr: None for pr in pairs}
    modes: dict[tuple[int, int], str] = {pr: "proximity" for pr in pairs}

    def fresh_engine(pair: tuple[int, int]) -> _DccEngine:
        mode = modes[pair]
        threshold = p - b if mode == "proximity" else p
        return _DccEngine(graph, mode, threshold, b, 2, log)

    for ts, samples in steps:
        cells = _located_cells(targets, samples, ts, locate_fn)
        for pair in pairs:
            pair_cells = [cells[pair[0]], cells[pair[1]]]
            engine = engines[pair]
            if engine is None:
                engine = fresh_engine(pair)
                triggered = engine.initialize(pair_cells)
                engines[pair] = engine
            else:
                triggered = engine.step(pair_cells)
            if triggered is not None:
                event = "add" if modes[pair] == "proximity" else "remove"
                log.events.append((ts, event, pair))
                modes[pair] = ("separation" if modes[pair] == "proximity"
                               else "proximity")
                engines[pair] = None  # re-initialized on the next step
    return log
