import numpy as np
import pytest

from conftest import line_graph, random_building_graph, reference_walking_distance
from fingerloc.core import InvariantViolation, Sample, Trace
from fingerloc.proximity import (
    MAY,
    MUST,
    MUST_NOT,
    BuildingGraph,
    GraphPoint,
    buddy_service,
    dcc_monitor,
    dcc_proximity_radius,
    dcc_separation_radius,
    dump_building_graph,
    load_building_graph,
    proximity_check,
    save_building_graph,
    separation_check,
    walking_distance,
    wds,
)


def test_line_graph_distance():
    g = line_graph(2)
    assert walking_distance(g, "c0", "c1") == 10.0
    assert walking_distance(g, "c0", "c0") == 0.0


def test_interjacent_cells_pass_through_transit_points_only():
    # A - B - C in a row; B's center hangs off the transit path, so the
    # A-to-C route must not pass through it
    points = [
        GraphPoint("ca", "center", "a"), GraphPoint("ta", "transit", "a"),
        GraphPoint("cb", "center", "b"), GraphPoint("tb1", "transit", "b"),
        GraphPoint("tb2", "transit", "b"),
        GraphPoint("cc", "center", "c"), GraphPoint("tc", "transit", "c"),
    ]
    edges = [
        ("ca", "ta", 2.0),
        ("ta", "tb1", 3.0),
        # cell b fully connected
        ("cb", "tb1", 10.0), ("cb", "tb2", 10.0), ("tb1", "tb2", 1.0),
        ("tb2", "tc", 3.0),
        ("cc", "tc", 2.0),
    ]
    g = BuildingGraph(points, edges)
    # through transit points: 2 + 3 + 1 + 3 + 2 = 11, not via cb (2+3+10+10+3+2)
    assert walking_distance(g, "a", "c") == 11.0
    # distance to b itself uses its center
    assert walking_distance(g, "a", "b") == 2.0 + 3.0 + 10.0


def test_two_floor_fixture_matches_oracle():
    # six cells over two floors: two rooms per corridor, a stairway cell
    # linking the floors with a heavier edge
    points = [
        GraphPoint("c-r1", "center", "r1"), GraphPoint("t-r1", "transit", "r1"),
        GraphPoint("c-r2", "center", "r2"), GraphPoint("t-r2", "transit", "r2"),
        GraphPoint("c-h1", "center", "h1"), GraphPoint("t-h1a", "transit", "h1"),
        GraphPoint("t-h1b", "transit", "h1"),
        GraphPoint("c-st", "center", "stair"), GraphPoint("t-st-lo", "transit", "stair"),
        GraphPoint("t-st-hi", "transit", "stair"),
        GraphPoint("c-h2", "center", "h2"), GraphPoint("t-h2", "transit", "h2"),
        GraphPoint("c-r3", "center", "r3"), GraphPoint("t-r3", "transit", "r3"),
    ]
    edges = [
        ("c-r1", "t-r1", 2.0), ("c-r2", "t-r2", 2.0),
        ("t-r1", "t-h1a", 1.0), ("t-r2", "t-h1b", 1.0),
        ("c-h1", "t-h1a", 3.0), ("c-h1", "t-h1b", 3.0), ("t-h1a", "t-h1b", 6.0),
        ("t-h1b", "t-st-lo", 2.0),
        ("c-st", "t-st-lo", 4.0), ("c-st", "t-st-hi", 4.0),
        ("t-st-lo", "t-st-hi", 8.0),  # stairs weighted heavier
        ("t-st-hi", "t-h2", 2.0),
        ("c-h2", "t-h2", 3.0),
        ("t-h2", "t-r3", 1.0), ("c-r3", "t-r3", 2.0),
    ]
    g = BuildingGraph(points, edges)
    for c1 in g.cells:
        for c2 in g.cells:
            assert walking_distance(g, c1, c2) == pytest.approx(
                reference_walking_distance(g, c1, c2))
    # rooms on opposite floors route through both corridors and the stairs
    assert walking_distance(g, "r1", "r3") == pytest.approx(
        2 + 1 + 6 + 2 + 8 + 2 + 1 + 2)


def test_walking_distance_matches_reference_oracle():
    rng = np.random.default_rng(1)
    for _ in range(25):
        g = random_building_graph(rng, n_cells=int(rng.integers(3, 9)))
        cells = g.cells
        for c1 in cells:
            for c2 in cells:
                assert walking_distance(g, c1, c2) == pytest.approx(
                    reference_walking_distance(g, c1, c2))


def test_walking_distance_is_a_metric():
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = random_building_graph(rng, n_cells=6)
        cells = g.cells
        table = g.distance_table()
        for a in cells:
            assert table[a][a] == 0.0
            for b in cells:
                assert table[a][b] == pytest.approx(table[b][a])
                for c in cells:
                    assert table[a][c] <= table[a][b] + table[b][c] + 1e-9


def test_wds_boundary_inclusive_and_monotone():
    g = line_graph(3)
    assert wds(g, "c0", 0.0) == {"c0"}
    assert wds(g, "c0", 10.0) == {"c0", "c1"}
    assert wds(g, "c0", 9.9) == {"c0"}
    assert wds(g, "c0", 20.0) == {"c0", "c1", "c2"}
    rng = np.random.default_rng(3)
    g = random_building_graph(rng, n_cells=7)
    radii = sorted(rng.uniform(0, 40, size=6))
    for c in g.cells:
        previous: set[str] = set()
        for r in radii:
            current = wds(g, c, r)
            assert previous <= current
            previous = current


def test_wds_equals_brute_force_filter():
    rng = np.random.default_rng(4)
    g = random_building_graph(rng, n_cells=6)
    table = g.distance_table()
    for c in g.cells:
        for r in (0.0, 5.0, 12.0, 30.0):
            assert wds(g, c, r) == {x for x in g.cells if table[c][x] <= r}


def test_graph_validation_errors():
    with pytest.raises(InvariantViolation):  # two centers for one cell
        BuildingGraph([GraphPoint("p1", "center", "a"),
                       GraphPoint("p2", "center", "a")], [("p1", "p2", 1.0)])
    with pytest.raises(InvariantViolation):  # intra-cell points not connected
        BuildingGraph([GraphPoint("p1", "center", "a"),
                       GraphPoint("p2", "transit", "a"),
                       GraphPoint("p3", "center", "b")],
                      [("p2", "p3", 1.0)])
    with pytest.raises(InvariantViolation):  # disconnected
        BuildingGraph([GraphPoint("p1", "center", "a"),
                       GraphPoint("p2", "center", "b")], [])
    with pytest.raises(InvariantViolation):  # non-positive weight
        BuildingGraph([GraphPoint("p1", "center", "a"),
                       GraphPoint("p2", "transit", "a")], [("p1", "p2", 0.0)])


def test_graph_file_round_trip(tmp_path):
    g = line_graph(3)
    path = tmp_path / "building.model"
    save_building_graph(g, str(path))
    again = load_building_graph(str(path))
    assert again.points == g.points
    assert again.adjacency == g.adjacency
    assert dump_building_graph(again) == path.read_text()


# -- dcc radii and bands ---------------------------------------------------------


def test_dcc_proximity_radius_formula():
    r = dcc_proximity_radius(20.0, 5.0, 10.0, 0.0)
    assert r.radius == 5.0
    assert not r.must_poll


def test_dcc_proximity_radius_poll_flag():
    r = dcc_proximity_radius(10.0, 5.0, 10.0, 5.0)
    assert r.must_poll
    assert r.radius == 2.5  # clamped to b/2


def test_dcc_proximity_radius_clamp():
    r = dcc_proximity_radius(16.0, 5.0, 10.0, 5.0)
    assert r.radius == 2.5  # raw 1 -> b/2
    assert not r.must_poll


def test_dcc_separation_radius_mirror():
    r = dcc_separation_radius(20.0, 5.0, 30.0, 0.0)
    assert r.radius == 5.0
    assert not r.must_poll
    r = dcc_separation_radius(26.0, 5.0, 30.0, 2.0)
    assert r.must_poll  # raw -1
    assert r.radius == 1.0
    r = dcc_separation_radius(24.0, 5.0, 30.0, 4.0)
    assert r.radius == 2.0  # raw 1 -> b/2


def test_proximity_check_bands():
    assert proximity_check(9.999, 10.0, 5.0) == MUST
    assert proximity_check(10.0, 10.0, 5.0) == MAY
    assert proximity_check(15.0, 10.0, 5.0) == MAY
    assert proximity_check(15.001, 10.0, 5.0) == MUST_NOT


def test_separation_check_bands():
    assert separation_check(35.001, 30.0, 5.0) == MUST
    assert separation_check(35.0, 30.0, 5.0) == MAY
    assert separation_check(30.0, 30.0, 5.0) == MAY
    assert separation_check(29.999, 30.0, 5.0) == MUST_NOT


# -- monitor -----------------------------------------------------------------------


def _target_trace(cell_schedule: list[tuple[str, int]]) -> Trace:
    """Trace whose ground truth follows (cell, n_samples) dwell blocks."""
    samples = []
    truth = []
    t = 0.0
    for cell, n in cell_schedule:
        truth.append((t, cell))
        for _ in range(n):
            samples.append(Sample(t, {"ap": 50}))
            t += 1.0
    return Trace(tuple(samples), tuple(truth))


def test_monitor_stationary_targets_only_initial_messages():
    g = line_graph(8)  # d(c0, ck) = 2 + 8k meters
    t1 = _target_trace([("c0", 40)])
    t2 = _target_trace([("c7", 40)])
    log = dcc_monitor(g, [t1, t2], "proximity", threshold=10.0, b=4.0)
    assert log.events == []
    assert log.updates == 0
    assert log.polls == 2  # initial poll of both targets
    assert log.configs == 2


def test_monitor_scripted_approach_detects_once():
    g = line_graph(8)
    walk = [(f"c{i}", 6) for i in range(7)]  # walks into the must zone at c6
    t1 = _target_trace(walk)
    t2 = _target_trace([("c7", 42)])
    log = dcc_monitor(g, [t1, t2], "proximity", threshold=12.0, b=6.0)
    assert len(log.events) == 1
    ts, kind, pair = log.events[0]
    assert kind == "proximity"
    assert pair == (0, 1)
    # event must fall inside the tolerance band around the true crossing
    d_at_event = walking_distance(g, t1.truth_at(ts), t2.truth_at(ts))
    assert d_at_event <= 12.0 + 6.0


def test_monitor_never_fires_outside_band():
    rng = np.random.default_rng(8)
    g = line_graph(10)
    for trial in range(10):
        start1, start2 = 0, 9
        sched1, sched2 = [], []
        pos1, pos2 = start1, start2
        for _ in range(12):
            sched1.append((f"c{pos1}", 3))
            sched2.append((f"c{pos2}", 3))
            pos1 = int(np.clip(pos1 + rng.integers(-1, 2), 0, 9))
            pos2 = int(np.clip(pos2 + rng.integers(-1, 2), 0, 9))
        t1, t2 = _target_trace(sched1), _target_trace(sched2)
        log = dcc_monitor(g, [t1, t2], "proximity", threshold=8.0, b=8.0)
        for ts, _, _ in log.events:
            d = walking_distance(g, t1.truth_at(ts), t2.truth_at(ts))
            assert proximity_check(d, 8.0, 8.0) != MUST_NOT


def test_monitor_separation_scripted():
    g = line_graph(8)
    t1 = _target_trace([("c0", 40)])
    t2 = _target_trace([(f"c{min(i, 7)}", 5) for i in range(8)])
    log = dcc_monitor(g, [t1, t2], "separation", threshold=30.0, b=6.0)
    assert len(log.events) == 1
    ts, kind, _ = log.events[0]
    assert kind == "separation"
    d = walking_distance(g, t1.truth_at(ts), t2.truth_at(ts))
    assert separation_check(d, 30.0, 6.0) != MUST_NOT


def test_monitor_message_count_below_baseline():
    g = line_graph(8)
    t1 = _target_trace([("c0", 30), ("c1", 30)])
    t2 = _target_trace([("c7", 30), ("c6", 30)])
    log = dcc_monitor(g, [t1, t2], "proximity", threshold=10.0, b=4.0)
    assert log.messages <= log.baseline == 120


def test_monitor_rejects_misaligned_timelines():
    g = line_graph(3)
    t1 = _target_trace([("c0", 10)])
    t2 = _target_trace([("c2", 12)])
    with pytest.raises(InvariantViolation):
        dcc_monitor(g, [t1, t2], "proximity", 5.0, 2.0)


def test_monitor_requires_labels():
    g = line_graph(3)
    t1 = _target_trace([("c0", 10)])
    unlabeled = Trace(t1.samples)
    with pytest.raises(InvariantViolation):
        dcc_monitor(g, [t1, unlabeled], "proximity", 5.0, 2.0)


# -- buddy service ------------------------------------------------------------------


def test_buddy_pair_never_close_stays_empty():
    g = line_graph(8)
    t1 = _target_trace([("c0", 50)])
    t2 = _target_trace([("c7", 50)])
    log = buddy_service(g, [t1, t2], p=15.0, b=5.0)
    assert log.events == []


def test_buddy_meet_then_part():
    g = line_graph(8)
    approach = [(f"c{i}", 6) for i in range(6)] + [(f"c{5 - i}", 6) for i in range(6)]
    t1 = _target_trace(approach)
    t2 = _target_trace([("c7", 72)])
    log = buddy_service(g, [t1, t2], p=25.0, b=5.0)
    kinds = [kind for _, kind, _ in log.events]
    assert kinds == ["add", "remove"]
    add_ts = log.events[0][0]
    remove_ts = log.events[1][0]
    assert add_ts < remove_ts
    # add within the proximity band, remove within the separation band
    d_add = walking_distance(g, t1.truth_at(add_ts), "c7")
    d_remove = walking_distance(g, t1.truth_at(remove_ts), "c7")
    assert proximity_check(d_add, 20.0, 5.0) != MUST_NOT
    assert separation_check(d_remove, 25.0, 5.0) != MUST_NOT


def test_buddy_hover_inside_band_any_outcome():
    # walking distance held strictly inside (p-b, p+b): events are optional,
    # but list membership must respect the must/must-not bounds
    g = line_graph(8)
    t1 = _target_trace([("c0", 40)])
    t2 = _target_trace([("c2", 40)])  # distance 18
    log = buddy_service(g, [t1, t2], p=20.0, b=4.0)
    kinds = [kind for _, kind, _ in log.events]
    for first, second in zip(kinds, kinds[1:]):
        assert (first, second) in (("add", "remove"), ("remove", "add"))


def test_buddy_requires_p_above_b():
    g = line_graph(3)
    t1 = _target_trace([("c0", 10)])
    t2 = _target_trace([("c2", 10)])
    with pytest.raises(ValueError):
        buddy_service(g, [t1, t2], p=3.0, b=5.0)
