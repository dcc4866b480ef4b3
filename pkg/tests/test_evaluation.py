import json
import math

import numpy as np
import pytest
import torch

from mosearch.agent import NetConfig, SearchPolicy, save_checkpoint
from mosearch.baselines import SGoLAM
from mosearch.env import episode_recipe, replay
from mosearch.evaluation import (REAL_WORLD, DegenerateEpisodeError, EvalReport, EpisodeResult,
                                 PolicyAgent, emit_manifest, emit_plotdata, emit_tables,
                                 episode_schedule, make_agent, read_table, replay_plotdata,
                                 run_episode, run_eval, spl)
from mosearch.simulator import V_MAX, W_MAX


# ---------------------------------------------------------------------------
# SPL


def test_spl_examples():
    assert spl(True, 4.0, 4.0) == 1.0
    assert spl(True, 5.0, 10.0) == 0.5
    assert spl(False, 5.0, 6.0) == 0.0
    with pytest.raises(DegenerateEpisodeError):
        spl(True, 0.0, 3.0)


def test_spl_bounds(rng):
    for _ in range(200):
        l_ref, p = rng.uniform(0.01, 20, 2)
        s = spl(bool(rng.integers(2)), l_ref, p)
        assert 0.0 <= s <= 1.0
    # a path shorter than the reference (greedy overestimate) still caps at 1
    assert spl(True, 5.0, 4.0) == 1.0


# ---------------------------------------------------------------------------
# schedule and tables


def test_schedule_is_identical_across_agents():
    a = episode_schedule((100, 101), (1, 2, 3), 6)
    b = episode_schedule((100, 101), (1, 2, 3), 6)
    assert a == b
    assert [r["k"] for r in a[:6]] == [1, 2, 3, 1, 2, 3]
    assert len({r["seed"] for r in a}) == len(a)
    assert {r["scene"] for r in a} == {100, 101}


def _result(k, success, spl_value, seed=0):
    return EpisodeResult("x", 100, seed, k, success, 3.0, 2.0, spl_value, 10, 0,
                         "success" if success else "timeout")


def test_one_cell_table_has_header_and_one_row(tmp_path):
    rep = EvalReport("sgolam", [_result(2, True, 0.5), _result(2, False, 0.0, seed=1)])
    rows = [r for r in rep.rows if r["k"] != "avg"]
    assert rows == [{"agent": "sgolam", "k": 2, "success": 0.5, "spl": 0.25, "n": 2}]
    path = tmp_path / "results.csv"
    emit_tables(rep, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "agent,k,success,spl,n"
    assert lines[1] == "sgolam,2,0.5000,0.2500,2"
    assert read_table(path)[0] == rows[0]


def test_table_round_trip(tmp_path, rng):
    results = [_result(int(k), bool(s), float(v) if s else 0.0, seed=i)
               for i, (k, s, v) in enumerate(zip(rng.integers(1, 7, 40), rng.integers(0, 2, 40),
                                                 rng.uniform(0, 1, 40)))]
    rep = EvalReport("random", results)
    emit_tables(rep, tmp_path / "t.csv")
    back = read_table(tmp_path / "t.csv")
    assert len(back) == len(rep.rows)
    for got, want in zip(back, rep.rows):
        assert got["agent"] == want["agent"] and got["k"] == want["k"] and got["n"] == want["n"]
        assert got["success"] == pytest.approx(want["success"], abs=5e-5)
        assert got["spl"] == pytest.approx(want["spl"], abs=5e-5)


def test_manifest_hash_tracks_settings(tmp_path):
    a = emit_manifest(tmp_path / "a.json", {"agents": "random", "seed": 0})
    b = emit_manifest(tmp_path / "b.json", {"seed": 0, "agents": "random"})
    c = emit_manifest(tmp_path / "c.json", {"agents": "random", "seed": 1})
    assert a == b != c
    assert json.loads((tmp_path / "a.json").read_text())["version"] == 1


# ---------------------------------------------------------------------------
# runs


def test_oracle_follower_is_near_optimal():
    rep = run_eval("oracle", range(100, 120), (1,), 1)
    row = rep.rows[0]
    assert row["success"] == 1.0
    assert row["spl"] >= 0.95
    for r in rep.results:
        assert 0.0 <= r.spl <= 1.0


def test_random_agent_rarely_finds_six():
    rep = run_eval("random", (100, 101), (6,), 2)
    assert rep.rows[0]["success"] <= 0.25
    assert all(r.spl == 0.0 for r in rep.results if not r.success)


def test_eval_is_deterministic_and_worker_independent(tmp_path):
    kw = dict(scene_seeds=(100,), k_range=(1, 2), episodes_per_scene=2, step_cap=300)
    a = run_eval("sgolam", **kw)
    b = run_eval("sgolam", **kw)
    c = run_eval("sgolam", workers=2, **kw)
    emit_tables(a, tmp_path / "a.csv")
    emit_tables(b, tmp_path / "b.csv")
    emit_tables(c, tmp_path / "c.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "c.csv").read_bytes()
    assert a.results == c.results


def test_success_monotone_in_step_cap():
    recipes = episode_schedule((100, 101), (2, 3), 2)
    for name in ("oracle", "random"):
        for rec in recipes:
            prev = False
            for cap in (50, 150, 400, 1200):
                agent = make_agent(name, seed=0)
                ok = run_episode(agent, rec, max_steps=cap).success
                assert ok or not prev, f"{name} lost success when the cap grew to {cap}"
                prev = ok


def test_broken_episode_counts_as_failure():
    class Crashing:
        name = "crash"

        def reset(self, env, seed=None):
            pass

        def act(self, env):
            raise RuntimeError("boom")

    res = run_episode(Crashing(), episode_recipe(5, 1, floorplan_seed=100))
    assert not res.success and res.spl == 0.0 and res.status == "error"
    assert "boom" in res.error


def test_plotdata_replays_to_same_map(tmp_path):
    rec = episode_recipe(9, 2, floorplan_seed=101)
    log = tmp_path / "ep.jsonl"
    run_episode(make_agent("sgolam", seed=9), rec, log, max_steps=200)
    env = replay(log)
    emit_plotdata(env, tmp_path / "ep.plot.json")
    replayed, same = replay_plotdata(tmp_path / "ep.plot.json")
    assert same
    assert replayed.state.steps_elapsed == env.state.steps_elapsed


def test_plotdata_version_checked(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"version": 7}))
    with pytest.raises(ValueError):
        replay_plotdata(path)


# ---------------------------------------------------------------------------
# deployment knobs


def test_real_world_preset(tmp_path):
    assert REAL_WORLD == {"tau": 0.1, "action_scale": 0.55, "inflation_radius": 0.05}
    torch.manual_seed(0)
    ckpt = tmp_path / "ours.pt"
    save_checkpoint(ckpt, SearchPolicy(NetConfig().reduced(8)))
    agent = make_agent("ours", ckpt, **REAL_WORLD)
    assert isinstance(agent, PolicyAgent)
    assert agent.tau == 0.1 and agent.worker.action_scale == 0.55
    sg = make_agent("sgolam", **REAL_WORLD)
    assert isinstance(sg, SGoLAM) and sg.inflation_radius == 0.05

    actions = []

    class Recorder:
        name = "ours"

        def reset(self, env, seed=None):
            agent.reset(env, seed)

        def act(self, env):
            a = agent.act(env)
            actions.append(a)
            return a

    res = run_episode(Recorder(), episode_recipe(3, 1, floorplan_seed=100), max_steps=15)
    assert res.error is None and len(actions) == 15
    acts = np.array(actions)
    assert np.all(np.abs(acts[:, 0]) <= 0.55 * V_MAX + 1e-12)
    assert np.all(np.abs(acts[:, 1]) <= 0.55 * W_MAX + 1e-12)


def test_learned_agent_needs_matching_checkpoint(tmp_path):
    with pytest.raises(ValueError):
        make_agent("ours")
    ckpt = tmp_path / "mo.pt"
    save_checkpoint(ckpt, SearchPolicy(NetConfig(variant="map_only").reduced(8)))
    with pytest.raises(ValueError):
        make_agent("ours", ckpt)
    with pytest.raises(ValueError):
        make_agent("nobody")
