import math

import numpy as np
import pytest

from mosearch import mapping
from mosearch.mapping import (FOUND, FREE, OVERLAY, TRACE, UNEXPLORED, WALL, GlobalMap,
                              UnknownInstanceError, decode_rgb, encode_rgb, extract_ego)
from mosearch.simulator import RobotState, Simulator, move, sense

from conftest import box_grid, episode
from oracles import visible_cells


def _frame(grid, pose):
    return sense(RobotState(*pose), grid)


def test_max_depth_frame_is_free_wedge():
    g = box_grid(620, 620)
    pose = (10.0, 10.0, 0.0)
    m = GlobalMap.like(g).integrate(pose, _frame(g, pose))
    codes = set(np.unique(m.codes).tolist())
    assert codes == {UNEXPLORED, FREE, TRACE}
    assert not np.any(m.codes >= WALL)
    # the wedge lies ahead of the agent and reaches about 5.6 m
    rr, cc = np.nonzero(m.codes == FREE)
    dx = (cc + 0.5) * g.resolution - pose[0]
    dy = (rr + 0.5) * g.resolution - pose[1]
    assert np.all(dx > -g.resolution)
    assert np.hypot(dx, dy).max() == pytest.approx(5.6, abs=2 * g.resolution)
    far = np.hypot(dx, dy) > 1.0
    assert np.all(np.abs(np.arctan2(dy[far], dx[far])) <= math.radians(39.5) + 0.05)


def test_integrate_is_idempotent():
    ep = episode(1)
    pose = ep.start_pose
    f = _frame(ep.grid, pose)
    m = GlobalMap.like(ep.grid).integrate(pose, f)
    again = m.copy().integrate(pose, f)
    assert np.array_equal(m.codes, again.codes)
    assert np.array_equal(m.instance, again.instance)


def test_spin_marks_every_visible_wall():
    g = box_grid(130, 160)
    res = g.resolution
    g.occupancy[60:75, 100:110] = 1  # a pillar casting a shadow
    x, y = 1.2, 2.1
    blocked = g.blocked
    m = GlobalMap.like(g)
    state = RobotState(x, y, 0.0)
    for _ in range(50):  # 50 * 0.15 rad > 2 pi
        m.integrate(state.pose, sense(state, g))
        state, _ = move(state, (0.0, 1.5), blocked, res)
    visible = visible_cells(blocked, res, x, y, 5.6)
    marked = set(zip(*np.nonzero(m.codes == WALL)))
    missing = visible - marked
    assert not missing, f"{len(missing)} visible wall cells never marked"
    # and nothing hidden behind the pillar was marked
    assert not (marked - visible - _neighbours(visible))


def _neighbours(cells):
    out = set()
    for r, c in cells:
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                out.add((r + dr, c + dc))
    return out




def test_mark_found_is_permanent_and_idempotent():
    ep = episode(0, k=2)
    g = ep.grid
    obj = ep.objects[0]
    # stand 1 m from the object, facing it
    pose = (obj.center[0] - 0.7, obj.center[1], 0.0)
    state = RobotState(*pose)
    m = GlobalMap.like(g)
    for th in np.linspace(-math.pi, math.pi, 12, endpoint=False):
        m.integrate((pose[0], pose[1], th), sense(RobotState(pose[0], pose[1], th), g))
    assert obj.instance_id in m.seen_instances()
    m.mark_found(obj.instance_id)
    cells = m.instance == obj.instance_id
    assert np.all(m.codes[cells] == FOUND)
    once = m.codes.copy()
    m.mark_found(obj.instance_id)
    assert np.array_equal(m.codes, once)
    m.integrate(pose, sense(state, g))
    assert np.all(m.codes[m.instance == obj.instance_id] == FOUND)


def test_mark_unseen_instance_raises():
    m = GlobalMap(10, 10, 0.033)
    with pytest.raises(UnknownInstanceError):
        m.mark_found(3)


def test_exploration_is_monotone():
    ep = episode(2, k=1)
    s = Simulator(ep)
    m = GlobalMap.like(ep.grid).integrate(s.state.pose, s.frame)
    rng = np.random.default_rng(3)
    prev_codes = m.codes.copy()
    for _ in range(300):
        s.step((rng.uniform(0, 0.5), rng.uniform(-1.5, 1.5)))
        m.integrate(s.state.pose, s.frame)
        assert m.explored_count() >= np.count_nonzero(prev_codes)
        assert not np.any((prev_codes != UNEXPLORED) & (m.codes == UNEXPLORED))
        prev_codes = m.codes.copy()
        if s.status != "running":
            break


def test_agent_cell_marked_trace():
    ep = episode(2)
    s = Simulator(ep)
    m = GlobalMap.like(ep.grid).integrate(s.state.pose, s.frame)
    r, c = ep.grid.cell_of(s.state.x, s.state.y)
    assert m.codes[r, c] == TRACE


def _filled_map(seed=3):
    ep = episode(seed, k=3)
    s = Simulator(ep)
    m = GlobalMap.like(ep.grid).integrate(s.state.pose, s.frame)
    for _ in range(60):
        s.step((0.2, 0.9))
        m.integrate(s.state.pose, s.frame)
    return ep, m


def test_crop_shapes_and_palette():
    _, m = _filled_map()
    crops = extract_ego(m, (2.0, 2.0, 0.4))
    assert crops.fine.shape == (84, 84)
    assert crops.coarse.shape == (224, 224)
    coarse_rgb, fine_rgb = crops.rgb()
    assert fine_rgb.shape == (84, 84, 3) and coarse_rgb.shape == (224, 224, 3)
    assert mapping.FINE_SIZE * 0.033 == pytest.approx(2.77, abs=0.01)
    assert mapping.COARSE_SIZE * 0.066 == pytest.approx(14.8, abs=0.02)


def test_crop_centre_is_agent_cell(rng):
    ep, m = _filled_map()
    res = m.resolution
    for _ in range(100):
        x = rng.uniform(0, m.width * res)
        y = rng.uniform(0, m.height * res)
        th = rng.uniform(-math.pi, math.pi)
        crops = extract_ego(m, (x, y, th))
        r, c = int(math.floor(y / res)), int(math.floor(x / res))
        assert crops.fine[42, 42] == m.codes[r, c]


def test_crop_angle_wrap(rng):
    _, m = _filled_map()
    for _ in range(20):
        x, y = rng.uniform(1, 5), rng.uniform(1, 5)
        th = rng.uniform(-math.pi, math.pi)
        a = extract_ego(m, (x, y, th), prev_bin=4)
        b = extract_ego(m, (x, y, th + 2 * math.pi), prev_bin=4)
        assert np.array_equal(a.fine, b.fine)
        assert np.array_equal(a.coarse, b.coarse)


def _window_oracle(codes, ar, ac, size, block):
    """Axis-aligned window read for a robot facing +x: ahead is up, +y is left."""
    h, w = codes.shape
    half = size // 2
    out = np.zeros((size, size), dtype=codes.dtype)
    for i in range(size):
        for j in range(size):
            vals = [0]
            for a in range(block):
                for b in range(block):
                    r = ar + block * (half - j) - b
                    c = ac + block * (half - i) - a
                    if 0 <= r < h and 0 <= c < w:
                        vals.append(codes[r, c])
            out[i, j] = max(vals)
    return out


def test_heading_zero_equals_window_copy():
    _, m = _filled_map()
    res = m.resolution
    for x, y in [(2.0, 2.0), (0.3, 5.0), (4.4, 1.1)]:
        crops = extract_ego(m, (x, y, 0.0))
        ar, ac = int(math.floor(y / res)), int(math.floor(x / res))
        assert np.array_equal(crops.fine, _window_oracle(m.codes, ar, ac, 84, 1))
        assert np.array_equal(crops.coarse, _window_oracle(m.codes, ar, ac, 224, 2))


def test_wall_ahead_lands_in_upper_half():
    g = box_grid(200, 200)
    res = g.resolution
    wall_col = 120
    g.occupancy[:, wall_col] = 1
    pose = (wall_col * res - 1.0, 3.3, 0.0)
    m = GlobalMap.like(g).integrate(pose, _frame(g, pose))
    fine = extract_ego(m, pose).fine
    rows = np.nonzero(fine == WALL)[0]
    assert rows.size
    assert np.all(rows < 42)
    # 1 m ahead is about 30 cells above the centre row
    assert abs(42 - int(np.median(rows)) - round(1.0 / res)) <= 1


def test_prediction_overlay_arrow():
    m = GlobalMap(200, 200, 0.033)
    plain = extract_ego(m, (3.3, 3.3, 0.0))
    assert not np.any(plain.fine == OVERLAY)
    arrow = extract_ego(m, (3.3, 3.3, 0.0), prev_bin=6)  # bin 6 is straight ahead
    rr, cc = np.nonzero(arrow.fine == OVERLAY)
    assert len(rr) == mapping.ARROW_LENGTH
    assert set(cc.tolist()) == {42}
    assert sorted(rr.tolist()) == list(range(42 - mapping.ARROW_LENGTH, 42))


def test_palette_round_trip():
    codes = np.arange(mapping.N_CODES, dtype=np.uint8).reshape(1, -1)
    assert np.array_equal(decode_rgb(encode_rgb(codes)), codes)
    colours = {tuple(c) for c in mapping.PALETTE.tolist()}
    assert len(colours) == mapping.N_CODES
    assert tuple(mapping.PALETTE[UNEXPLORED]) == (0, 0, 0)


def test_snapshot_round_trip():
    _, m = _filled_map()
    text = m.dump_snapshot((1.0, 2.0, 0.5), 60)
    header, codes = GlobalMap.load_snapshot(text)
    assert header["step"] == 60 and header["pose"] == [1.0, 2.0, 0.5]
    assert np.array_equal(codes, m.codes)


def test_snapshot_version_checked():
    m = GlobalMap(3, 4, 0.033)
    text = m.dump_snapshot().replace('"version": 1', '"version": 9')
    with pytest.raises(ValueError):
        GlobalMap.load_snapshot(text)
