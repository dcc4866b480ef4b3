import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mosearch import kernels
from mosearch.oracle import (
    BIN_CENTERS, N_BINS, AngleLabel, GeodesicOracle, NoPathError, NoReachableTargetError, Path,
    angle_bin, astar, astar_to_object, bin_center, closest_target, greedy_reference_length,
    inflate, object_inflated, octile, optimal_reference_length, path_cost, waypoint_and_angle,
    wrap_angle,
)
from mosearch.worldgen import SemanticGrid

from conftest import box_grid, episode
import oracles

RES = 0.033


def random_grid(rng, h=64, w=64, density=0.3):
    g = SemanticGrid.empty(h, w, RES)
    g.occupancy[:] = (rng.random((h, w)) < density).astype(np.uint8)
    return g


def free_pair(rng, free):
    rows, cols = np.nonzero(free)
    i, j = rng.integers(len(rows), size=2)
    return (int(rows[i]), int(cols[i])), (int(rows[j]), int(cols[j]))


# ---------------------------------------------------------------------------
# angle bins


def test_bin_six_is_straight_ahead():
    assert angle_bin(0.0) == 6
    assert bin_center(6) == 0.0
    assert angle_bin(math.pi) == angle_bin(-math.pi + 1e-12) == 0


@given(st.floats(-20, 20, allow_nan=False))
def test_bin_wrap_invariance(a):
    assert angle_bin(a) == angle_bin(a + 2 * math.pi)


@given(st.floats(-math.pi, math.pi, allow_nan=False))
def test_bin_contains_angle(a):
    b = angle_bin(a)
    assert abs(wrap_angle(a - bin_center(b))) <= math.pi / 12 + 1e-9


def test_bin_centres_map_to_themselves():
    assert [angle_bin(c) for c in BIN_CENTERS] == list(range(N_BINS))


def test_one_hot_sums_to_one():
    lab = AngleLabel.from_angle(1.0)
    assert lab.one_hot.sum() == 1.0 and lab.one_hot[lab.bin] == 1.0


# ---------------------------------------------------------------------------
# inflation


def test_inflate_zero_is_identity():
    g = random_grid(np.random.default_rng(0))
    assert np.array_equal(inflate(g, 0.0).blocked, g.blocked)


def test_inflate_single_cell_disc():
    g = SemanticGrid.empty(41, 41, RES)
    g.occupancy[:] = 0
    g.occupancy[20, 20] = 1
    blocked = inflate(g, 0.2).blocked
    rr, cc = np.mgrid[:41, :41]
    disc = (rr - 20) ** 2 + (cc - 20) ** 2 <= 6 ** 2
    assert np.array_equal(blocked, disc)


def test_inflation_is_monotone():
    g = random_grid(np.random.default_rng(1), density=0.05)
    prev = g.blocked
    for r in (0.05, 0.1, 0.2, 0.3):
        cur = inflate(g, r).blocked
        assert np.all(cur >= prev)
        prev = cur


def test_inflation_costs_never_shrink():
    rng = np.random.default_rng(2)
    g = random_grid(rng, density=0.03)
    base = inflate(g, 0.0)
    infl = inflate(g, 0.1)
    checked = 0
    while checked < 50:
        a, b = free_pair(rng, infl.free)
        try:
            c_inf = astar(infl, a, b).cost
        except NoPathError:
            continue
        assert c_inf >= astar(base, a, b).cost
        checked += 1


# ---------------------------------------------------------------------------
# A*


def test_straight_corridor_cost():
    g = SemanticGrid.empty(3, 12, RES)
    g.occupancy[1, :] = 0
    p = astar(inflate(g, 0.0), (1, 0), (1, 10))
    assert p.cost == pytest.approx(10 * RES, abs=0)
    assert len(p) == 11


def test_walled_off_goal():
    g = box_grid(20, 20)
    g.occupancy[:, 10] = 1
    with pytest.raises(NoPathError):
        astar(inflate(g, 0.0), (5, 5), (5, 15))


def test_blocked_start_is_a_different_error():
    g = box_grid(20, 20)
    with pytest.raises(ValueError):
        astar(inflate(g, 0.0), (0, 0), (5, 5))


def test_path_cells_adjacent_and_free():
    rng = np.random.default_rng(3)
    g = random_grid(rng, density=0.2)
    infl = inflate(g, 0.0)
    for _ in range(20):
        a, b = free_pair(rng, infl.free)
        try:
            p = astar(infl, a, b)
        except NoPathError:
            continue
        assert infl.free[p.rows, p.cols].all()
        steps = np.maximum(np.abs(np.diff(p.rows)), np.abs(np.diff(p.cols)))
        assert np.all(steps == 1)


def test_astar_matches_dijkstra_random_grids():
    rng = np.random.default_rng(4)
    for _ in range(20):
        g = random_grid(rng, density=rng.uniform(0.1, 0.35))
        infl = inflate(g, 0.0)
        a, b = free_pair(rng, infl.free)
        counts = oracles.dijkstra_counts(infl.free, a, b)
        if counts is None:
            with pytest.raises(NoPathError):
                astar(infl, a, b)
        else:
            assert astar(infl, a, b).cost == path_cost(*counts, RES)


def test_octile_is_admissible():
    rng = np.random.default_rng(5)
    g = random_grid(rng, density=0.25)
    infl = inflate(g, 0.0)
    for _ in range(30):
        a, b = free_pair(rng, infl.free)
        try:
            cost = astar(infl, a, b).cost
        except NoPathError:
            continue
        assert octile(a, b, RES) <= cost + 1e-12


def test_path_cost_from_counts():
    p = Path(np.array([0, 1, 2, 2]), np.array([0, 1, 1, 2]), RES)
    assert p.n_diagonal == 1
    assert p.cost == path_cost(2, 1, RES)


# ---------------------------------------------------------------------------
# waypoint labels


def test_waypoint_straight_ahead():
    pts = np.stack([np.linspace(0, 2, 61), np.zeros(61)], axis=1)
    lab = waypoint_and_angle(pts, (0.0, 0.0, 0.0))
    assert lab.alpha == 0.0 and lab.bin == 6


def test_waypoint_directly_behind():
    pts = np.stack([np.linspace(0, -2, 61), np.zeros(61)], axis=1)
    lab = waypoint_and_angle(pts, (0.0, 0.0, 0.0))
    assert abs(lab.alpha) == pytest.approx(math.pi)
    assert lab.bin == 0


def test_waypoint_short_path_uses_last_vertex():
    pts = np.array([[0.0, 0.0], [0.0, 0.1]])
    lab = waypoint_and_angle(pts, (0.0, 0.0, 0.0))
    assert lab.alpha == pytest.approx(math.pi / 2)


def test_waypoint_arc_distance_fuzzed():
    ep = episode(0, 1)
    geo = GeodesicOracle(ep.grid, ep.objects)
    obj = ep.objects[0]
    free = geo.free[obj.instance_id]
    rng = np.random.default_rng(6)
    rows, cols = np.nonzero(free & np.isfinite(geo.fields[obj.instance_id]))
    checked = 0
    for i in rng.integers(len(rows), size=200):
        x, y = ep.grid.cell_center(rows[i], cols[i])
        path = geo.path(obj.instance_id, x, y)
        pts = path.waypoints
        arc = np.concatenate([[0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
        if arc[-1] < 0.55:
            continue
        lab = waypoint_and_angle(path, (x, y, 0.0))
        j = np.flatnonzero((arc >= 0.4) & (arc <= 0.55))[0]
        assert 0.4 <= arc[j] <= 0.55
        wx, wy = pts[j]
        assert lab.alpha == pytest.approx(math.atan2(wy - y, wx - x))
        checked += 1
    assert checked > 100


# ---------------------------------------------------------------------------
# targets and references


def test_closest_target_single_object():
    ep = episode(0, 1)
    obj, cost = closest_target(ep.start_pose, ep.objects, ep.grid)
    assert obj == ep.objects[0] and cost > 0


def test_closest_target_prefers_cheaper():
    g = box_grid(20, 200)
    from mosearch.worldgen import ObjectPlacement, render_objects
    near = ObjectPlacement(1, 0, (3.0 + 0.0165, 0.33))
    far = ObjectPlacement(0, 1, (5.0 + 0.0165, 0.33))
    g = render_objects(g, [near, far])
    obj, cost = closest_target((0.0165 + 0.033, 0.33, 0.0), [far, near], g, radius=0.0)
    assert obj.instance_id == 1


def test_closest_target_unreachable():
    g = box_grid(20, 40)
    g.occupancy[:, 20] = 1
    from mosearch.worldgen import ObjectPlacement, render_objects
    obj = ObjectPlacement(0, 0, (1.0, 0.33))
    g = render_objects(g, [obj])
    with pytest.raises(NoReachableTargetError):
        closest_target((0.2, 0.33, 0.0), [obj], g, radius=0.0)


@pytest.mark.parametrize("seed", range(10))
def test_closest_target_matches_brute_force(seed):
    ep = episode(seed, 3)
    x, y, _ = ep.start_pose
    costs = {}
    for obj in ep.objects:
        free = object_inflated(ep.grid, obj, 0.2).free
        field = oracles.dijkstra_field(free, [ep.grid.cell_of(*obj.center)])
        r, c = ep.grid.cell_of(x, y)
        costs[obj.instance_id] = field[r, c] * ep.grid.resolution
    best = min(sorted(costs), key=lambda i: costs[i])
    obj, cost = closest_target(ep.start_pose, ep.objects, ep.grid)
    assert obj.instance_id == best
    assert cost == pytest.approx(costs[best], abs=1e-9)
    geo = GeodesicOracle(ep.grid, ep.objects)
    assert geo.closest(x, y, {o.instance_id for o in ep.objects})[0] == best


@pytest.mark.parametrize("seed", range(6))
def test_distance_field_matches_astar(seed):
    ep = episode(seed, 2)
    geo = GeodesicOracle(ep.grid, ep.objects)
    rng = np.random.default_rng(seed)
    for obj in ep.objects:
        free = geo.free[obj.instance_id]
        infl = object_inflated(ep.grid, obj, 0.2)
        goal = ep.grid.cell_of(*obj.center)
        rows, cols = np.nonzero(free & np.isfinite(geo.fields[obj.instance_id]))
        for i in rng.integers(len(rows), size=5):
            start = (int(rows[i]), int(cols[i]))
            p = astar(infl, start, goal)
            assert geo.fields[obj.instance_id][start] * ep.grid.resolution == pytest.approx(
                p.cost, rel=1e-12)


def test_greedy_reference_single_object():
    ep = episode(1, 1)
    obj = ep.objects[0]
    p = astar_to_object(ep.grid, None, obj, ep.start_pose[:2])
    geo = GeodesicOracle(ep.grid, ep.objects)
    expected = geo.distance(obj.instance_id, *ep.start_pose[:2]) - 1.3
    assert greedy_reference_length(ep) == pytest.approx(expected, abs=1e-12)
    # the snapped start cell differs from the continuous start by under a cell
    assert abs(greedy_reference_length(ep) - (p.cost - 1.3)) < 2 * ep.grid.resolution


def test_greedy_collinear_objects():
    from mosearch.worldgen import EpisodeSpec, ObjectPlacement, render_objects
    g = box_grid(40, 300)
    a = ObjectPlacement(0, 0, (4.0, 0.66))
    b = ObjectPlacement(1, 1, (8.0, 0.66))
    g = render_objects(g, [a, b])
    ep = EpisodeSpec(0, g, [a, b], np.array([1, 1, 0, 0, 0, 0, 0, 0]), (1.0, 0.66, 0.0))
    # near leg 3.0 - 1.3, then from 1.3 m short of a to 1.3 m short of b; the
    # second leg detours around a's disc.  Far-first would cost 5.7 + 1.4.
    length = greedy_reference_length(ep, radius=0.0)
    assert 1.7 + 4.0 <= length <= 1.7 + 4.0 + 0.25
    assert optimal_reference_length(ep, radius=0.0) == length


@pytest.mark.parametrize("seed", range(10))
def test_greedy_tour_bounds(seed):
    ep = episode(seed, 1 + seed % 6)
    geo = GeodesicOracle(ep.grid, ep.objects)
    x, y, _ = ep.start_pose
    singles = sum(geo.distance(o.instance_id, x, y) for o in ep.objects)
    greedy = greedy_reference_length(ep, geo=geo)
    assert greedy <= singles
    assert greedy >= optimal_reference_length(ep, geo=geo)
