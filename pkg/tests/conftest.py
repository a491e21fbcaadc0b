"""Shared builders for synthetic worlds, traces, and building graphs."""

from __future__ import annotations

import math

import numpy as np
import pytest

from fingerloc.adapt import LinearMapping
from fingerloc.core import Fingerprint, FingerprintMap, Sample, Trace, ValueRange
from fingerloc.emu import ClientModel, ScriptStep, SynthWorld, synth_trace
from fingerloc.proximity import BuildingGraph, GraphPoint


def make_sample(ts: float, **rss) -> Sample:
    return Sample(ts, dict(rss))


def make_fingerprints(data: dict[str, list[dict[str, int]]],
                      rng: ValueRange = ValueRange()) -> FingerprintMap:
    """Build fingerprints from {cell: [sample-dict, ...]}."""
    fps = {}
    for cell, sample_dicts in data.items():
        samples = tuple(Sample(float(i), dict(d))
                        for i, d in enumerate(sample_dicts))
        fps[cell] = Fingerprint(cell, samples)
    return FingerprintMap(fps, rng)


def grid_world(n_cols: int, n_rows: int, seed: int = 0,
               station_spacing: int = 2, noise: float = 1.0,
               base: float = 90.0, falloff: float = 6.0,
               visibility_floor: float = 12.0) -> dict[str, dict[str, tuple[float, float]]]:
    """Cells on a grid with stations whose mean rss decays with distance."""
    cells: dict[str, dict[str, tuple[float, float]]] = {}
    stations = []
    for sx in range(0, n_cols, station_spacing):
        for sy in range(0, n_rows, station_spacing):
            stations.append((f"ap{sx}x{sy}", sx, sy))
    for cx in range(n_cols):
        for cy in range(n_rows):
            entry = {}
            for name, sx, sy in stations:
                mean = base - falloff * math.hypot(cx - sx, cy - sy)
                if mean >= visibility_floor:
                    entry[name] = (mean, noise)
            cells[f"c{cx}x{cy}"] = entry
    return cells


def world_trace(cells: dict, script: list[tuple], seed: int,
                client: ClientModel = ClientModel(),
                sample_period: float = 1.0) -> Trace:
    """Generate a trace from (cell, seconds[, mode]) script tuples."""
    steps = tuple(ScriptStep(*entry) for entry in script)
    world = SynthWorld(cells, steps, client, ValueRange(), sample_period)
    return synth_trace(world, seed)


def fingerprints_from_cells(cells: dict, samples_per_cell: int = 30,
                            seed: int = 100) -> FingerprintMap:
    """Fingerprint set drawn directly from a synthetic world's cell models."""
    rng = np.random.default_rng(seed)
    vr = ValueRange()
    fps = {}
    for cell in sorted(cells):
        samples = []
        for i in range(samples_per_cell):
            rss = {st: vr.clamp(mean + (rng.normal(0, std) if std else 0.0))
                   for st, (mean, std) in sorted(cells[cell].items())}
            samples.append(Sample(float(i), rss))
        fps[cell] = Fingerprint(cell, tuple(samples))
    return FingerprintMap(fps, vr)


def line_graph(n_cells: int = 2, step: float = 8.0,
               stub: float = 1.0) -> BuildingGraph:
    """Cells in a row along a transit corridor.

    Neighboring centers are ``2*stub + step`` apart (10 m by default); the
    corridor runs transit-to-transit so interjacent centers are never on the
    path.
    """
    points = []
    edges = []
    for i in range(n_cells):
        points.append(GraphPoint(f"ctr{i}", "center", f"c{i}"))
        points.append(GraphPoint(f"tr{i}", "transit", f"c{i}"))
        edges.append((f"ctr{i}", f"tr{i}", stub))
        if i:
            edges.append((f"tr{i-1}", f"tr{i}", step))
    return BuildingGraph(points, edges)


def random_building_graph(rng: np.random.Generator, n_cells: int,
                          extra_edges: int = 3) -> BuildingGraph:
    """Random connected building: one center and one transit point per cell,
    cells linked transit-to-transit over a random tree plus extras."""
    points = []
    edges = []
    for i in range(n_cells):
        points.append(GraphPoint(f"ctr{i}", "center", f"c{i}"))
        points.append(GraphPoint(f"tr{i}", "transit", f"c{i}"))
        edges.append((f"ctr{i}", f"tr{i}", float(rng.integers(1, 6))))
    for i in range(1, n_cells):
        j = int(rng.integers(0, i))
        edges.append((f"tr{i}", f"tr{j}", float(rng.integers(1, 10))))
    for _ in range(extra_edges):
        i, j = rng.integers(0, n_cells, size=2)
        if i != j:
            edges.append((f"tr{i}", f"tr{j}", float(rng.integers(1, 10))))
    dedup = {}
    for a, b, w in edges:
        key = (min(a, b), max(a, b))
        dedup.setdefault(key, w)
    return BuildingGraph(points, [(a, b, w) for (a, b), w in dedup.items()])


def reference_walking_distance(graph: BuildingGraph, c1: str, c2: str) -> float:
    """Independent oracle: networkx Dijkstra on the transit-only subgraph."""
    import networkx as nx

    g = nx.Graph()
    allowed = {pid for pid, p in graph.points.items() if p.kind == "transit"}
    allowed.add(graph.center_of[c1])
    allowed.add(graph.center_of[c2])
    for a, nbrs in graph.adjacency.items():
        for b, w in nbrs.items():
            if a in allowed and b in allowed:
                g.add_edge(a, b, weight=w)
    if c1 == c2:
        return 0.0
    return float(nx.shortest_path_length(
        g, graph.center_of[c1], graph.center_of[c2], weight="weight"))


def normalization_world(n_precision: int = 10, sigma_precision: float = 0.25,
                        n_weight: int = 2, sigma_weight: float = 2.0,
                        ) -> dict[str, dict[str, tuple[float, float]]]:
    """Two complementary-signature cells for client-normalization studies.

    Narrow-sigma stations carry the fit precision; the wide-sigma stations
    keep the distribution-overlap weights informative when the client scale
    is shifted.  Levels are chosen so a moderate linear mapping keeps each
    reading nearest its own cell's distribution, while transformed values
    fall outside the per-station histogram supports (degrading unnormalized
    Bayes localization).
    """
    cells: dict[str, dict[str, tuple[float, float]]] = {"c0": {}, "c1": {}}
    for k in range(n_precision):
        hi = k % 2 == 0
        cells["c0"][f"p{k:02d}"] = (45.0 if hi else 10.0, sigma_precision)
        cells["c1"][f"p{k:02d}"] = (10.0 if hi else 45.0, sigma_precision)
    for k in range(n_weight):
        hi = k % 2 == 0
        cells["c0"][f"w{k}"] = (44.0 if hi else 10.0, sigma_weight)
        cells["c1"][f"w{k}"] = (10.0 if hi else 44.0, sigma_weight)
    return cells


def four_segment_script(dwell: float = 72.0, move: float = 14.0) -> list[tuple]:
    script: list[tuple] = [("c0", dwell)]
    for cell in ("c1", "c0", "c1"):
        script.append((cell, move, "move"))
        script.append((cell, dwell))
    return script


@pytest.fixture
def value_range() -> ValueRange:
    return ValueRange()


@pytest.fixture
def identity_client() -> ClientModel:
    return ClientModel(mapping=LinearMapping(1.0, 0.0))
