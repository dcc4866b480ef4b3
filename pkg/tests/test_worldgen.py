import itertools
import math

import numpy as np
import pytest
from scipy import ndimage

from mosearch import oracle
from mosearch.worldgen import (
    FLOORPLAN_VERSION, N_CLASSES, FloorplanVersionError, GenConfig, GenerationError,
    InfeasibleSpawnError, MalformedFloorplanError, generate_floorplan, load_floorplan,
    make_episode, save_floorplan, spawn_objects, wall_clearance,
)

from conftest import box_grid, episode


def test_floorplan_is_deterministic():
    a = generate_floorplan(7)
    b = generate_floorplan(7)
    assert a == b
    assert a != generate_floorplan(8)


@pytest.mark.parametrize("seed", range(6))
def test_floorplan_connectivity(seed):
    g = generate_floorplan(seed)
    free = ~g.walls
    labels, n = ndimage.label(free, structure=np.ones((3, 3)))
    sizes = np.bincount(labels.ravel())[1:]
    assert sizes.max() / free.sum() >= 0.95


@pytest.mark.parametrize("seed", range(4))
def test_boundary_is_wall(seed):
    g = generate_floorplan(seed)
    assert g.walls[0].all() and g.walls[-1].all()
    assert g.walls[:, 0].all() and g.walls[:, -1].all()


def test_single_room_is_one_rectangle():
    g = generate_floorplan(5, GenConfig(n_rooms=1))
    free = ~g.walls
    rows, cols = np.nonzero(free)
    assert free[rows.min():rows.max() + 1, cols.min():cols.max() + 1].all()
    assert free.sum() == (np.ptp(rows) + 1) * (np.ptp(cols) + 1)


def test_config_bounds_rejected():
    with pytest.raises(ValueError):
        generate_floorplan(0, GenConfig(door_width=0.5))
    with pytest.raises(ValueError):
        generate_floorplan(0, GenConfig(n_rooms=11))


def test_generation_error_reports_seed():
    err = GenerationError(42, "too cramped")
    assert err.seed == 42 and "42" in str(err)


def test_spawn_six_distinct_classes():
    g = generate_floorplan(2)
    objs = spawn_objects(g, 6, seed=9)
    assert len({o.class_id for o in objs}) == 6
    assert all(0 <= o.class_id < N_CLASSES for o in objs)


@pytest.mark.parametrize("seed", range(5))
def test_spawn_constraints(seed):
    g = generate_floorplan(seed)
    objs = spawn_objects(g, 6, seed=seed)
    for a, b in itertools.combinations(objs, 2):
        assert math.dist(a.center, b.center) >= 1.0
    clearance = wall_clearance(g)
    main = g.main_component()
    for o in objs:
        r, c = g.cell_of(*o.center)
        assert main[r, c]
        # exact distance from the centre to every wall cell square
        wr, wc = np.nonzero(g.walls)
        res = g.resolution
        dx = np.maximum(np.abs((wc + 0.5) * res - o.center[0]) - res / 2, 0)
        dy = np.maximum(np.abs((wr + 0.5) * res - o.center[1]) - res / 2, 0)
        assert np.hypot(dx, dy).min() >= 0.5
        assert clearance[r, c] >= 0.5


def test_spawn_in_small_room_keeps_wall_distance():
    g = box_grid(62, 62)  # about 2 m x 2 m
    (o,) = spawn_objects(g, 1, seed=0)
    x, y = o.center
    assert min(x - 0.033, y - 0.033, 62 * 0.033 - 0.033 - x, 62 * 0.033 - 0.033 - y) >= 0.5


def test_spawn_infeasible():
    with pytest.raises(InfeasibleSpawnError):
        spawn_objects(box_grid(30, 30), 1, seed=0)
    with pytest.raises(ValueError):
        spawn_objects(generate_floorplan(0), 7, seed=0)


def test_episode_goal_vector_and_determinism():
    a = make_episode(3, 2)
    b = make_episode(3, 2)
    assert a == b
    assert a.goal_vector.sum() == 2
    assert set(np.flatnonzero(a.goal_vector)) == {o.class_id for o in a.objects}
    assert a.step_cap == 3500 and a.collision_cap == 600


@pytest.mark.parametrize("seed,k", [(0, 1), (1, 3), (2, 6), (4, 4)])
def test_episode_objects_reachable(seed, k):
    ep = episode(seed, k)
    inflated = oracle.inflate(ep.grid, 0.2)
    for obj in ep.objects:
        path = oracle.astar_to_object(ep.grid, inflated, obj, ep.start_pose[:2])
        assert len(path) >= 1


def test_episode_connectivity_from_start():
    ep = episode(0, 1)
    free = ~ep.grid.walls
    labels, _ = ndimage.label(free, structure=np.ones((3, 3)))
    r, c = ep.grid.cell_of(*ep.start_pose[:2])
    assert (labels == labels[r, c]).sum() / free.sum() >= 0.95


def test_floorplan_round_trip(tmp_path):
    g = generate_floorplan(7)
    save_floorplan(g, tmp_path / "f.json")
    assert load_floorplan(tmp_path / "f.json") == g


def test_floorplan_round_trip_with_objects(tmp_path):
    ep = episode(1, 3)
    save_floorplan(ep.grid, tmp_path / "f.json", ep.objects)
    grid, objs = load_floorplan(tmp_path / "f.json", with_objects=True)
    assert grid == ep.grid
    assert objs == ep.objects


def test_truncated_floorplan(tmp_path):
    save_floorplan(generate_floorplan(7), tmp_path / "f.json")
    text = (tmp_path / "f.json").read_text()
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(MalformedFloorplanError) as err:
        load_floorplan(tmp_path / "t.json")
    assert "line" in str(err.value) or "field" in str(err.value)


def test_floorplan_version_mismatch(tmp_path):
    import json
    save_floorplan(generate_floorplan(7), tmp_path / "f.json")
    d = json.loads((tmp_path / "f.json").read_text())
    d["version"] = FLOORPLAN_VERSION + 1
    (tmp_path / "v.json").write_text(json.dumps(d))
    with pytest.raises(FloorplanVersionError):
        load_floorplan(tmp_path / "v.json")
