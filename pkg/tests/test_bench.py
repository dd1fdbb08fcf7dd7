import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instrexec.bench.baselines import LEARNED, SCRIPTED, MissingCheckpoint, make_baseline
from instrexec.bench.evaluate import EVAL_WORLD, episode_specs, evaluate
from instrexec.bench.oracles import (
    UNREACHABLE, goal_distance, near_optimal_policy, optimal_actions, shortest_path_policy, teacher_distribution,
)
from instrexec.env.gridworld import Action, Instruction, WorldConfig, reset, step
from instrexec.meta import MetaConfig, init_params as meta_init
from instrexec.skill import SkillConfig, init_params as skill_init
from instrexec.tasks import build_split

from helpers import tid, world


def test_visit_moves_along_shortest_path():
    s = world(["....", ".#..", "...p"], [("visit", tid("pig"))], agent=(0, 0), objects={"p": "pig"})
    assert set(optimal_actions(s, "visit", tid("pig"))) == {Action.MOVE_S, Action.MOVE_E}
    np.testing.assert_allclose(teacher_distribution(s, "visit", tid("pig"))[[2, 4]], [0.5, 0.5])
    assert goal_distance(s, "visit", tid("pig")) == 5


def test_pickup_when_adjacent_and_avoids_water():
    s = world([".p", ".."], [("pickup", tid("pig"))], agent=(0, 0), objects={"p": "pig"})
    assert optimal_actions(s, "pickup", tid("pig")) == [Action.PICKUP_E]
    s = world(["...", "~#.", "p.."], [("visit", tid("pig"))], agent=(0, 0), objects={"p": "pig"})
    # the dry path is longer but preferred
    assert optimal_actions(s, "visit", tid("pig")) == [Action.MOVE_E]


def test_interact_resolves_by_group():
    s = world([".c", ".g"], [("interact", tid("cow"))], agent=(0, 0), objects={"c": "cow", "g": "pig"})
    assert optimal_actions(s, "interact", tid("cow")) == [Action.PICKUP_E]  # group A: pick up
    s = world([".g", ".."], [("interact", tid("pig"))], agent=(0, 0), objects={"g": "pig"})
    assert optimal_actions(s, "interact", tid("pig")) == [Action.TRANSFORM_E]  # group B: transform


def test_missing_target_gives_noop():
    s = world(["..", ".."], [("visit", tid("pig"))], agent=(0, 0))
    assert optimal_actions(s, "visit", tid("pig")) == [Action.NOOP]
    assert goal_distance(s, "visit", tid("pig")) == UNREACHABLE


def _run(policy, state, limit=200, **kw):
    n = 0
    done = state.done
    while not done and n < limit:
        state, _, _, done, info = step(state, policy(state, **kw), inplace=True)
        n += 1
    return n, info


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.sampled_from(["visit", "pickup", "transform"]))
def test_shortest_path_is_admissible(seed, verb):
    cfg = WorldConfig(height=5, width=5, wall_density=0.1, water_density=0.0, object_density=0.2,
                      enemy_spawn_prob=0.0, episode_limit=100, seed=seed)
    state, _ = reset(cfg, [Instruction(verb, tid("pig"))])
    bound = goal_distance(state, verb, tid("pig")) + (0 if verb == "visit" else 1)
    steps, info = _run(shortest_path_policy, state)
    assert info["success"] and steps == bound


def test_near_optimal_engages_close_enemy_only():
    s = world(["...", "...", "..p"], [("visit", tid("pig"))], agent=(0, 0), objects={"p": "pig"}, enemy=(0, 1))
    assert near_optimal_policy(s) == Action.TRANSFORM_E
    # at distance two every move ends adjacent, where the enemy would just step away again: wait instead
    s = world(["...", "...", "..p"], [("visit", tid("pig"))], agent=(0, 0), objects={"p": "pig"}, enemy=(1, 1))
    assert near_optimal_policy(s) == Action.NOOP
    # at distance three a shortest-path move that ends two cells away is taken
    s = world(["...", "...", "..p"], [("visit", tid("pig"))], agent=(0, 1), objects={"p": "pig"}, enemy=(2, 0))
    assert near_optimal_policy(s) == Action.MOVE_S
    s = world(["....", "....", "...p"], [("visit", tid("pig"))], agent=(0, 0), objects={"p": "pig"}, enemy=(2, 2))
    assert near_optimal_policy(s) == shortest_path_policy(s)
    assert near_optimal_policy(s, engage_radius=4) != Action.NOOP


def test_oracles_noop_after_last_instruction():
    s = world(["p.", ".."], [("visit", tid("pig"))], agent=(0, 1), objects={"p": "pig"})
    s, *_ = step(s, Action.MOVE_W)
    assert s.current_instruction() is None
    assert shortest_path_policy(s) == Action.NOOP and near_optimal_policy(s) == Action.NOOP


# ---------------------------------------------------------------- baselines

def test_scripted_and_learned_kinds():
    for kind in SCRIPTED:
        assert make_baseline(kind).name == kind
    with pytest.raises(ValueError):
        make_baseline("oracle")
    for kind in ("ours", "hier_short", "hier_long"):
        with pytest.raises(MissingCheckpoint):
            make_baseline(kind)
        with pytest.raises(MissingCheckpoint):
            make_baseline(kind, skill_ckpt="/nonexistent/skill.ckpt")
    assert make_baseline("flat").name == "flat"
    assert set(LEARNED) == {"ours", "flat", "hier_short", "hier_long"}


def test_head_mismatch_is_rejected():
    scfg = SkillConfig(n_task_actions=3, n_task_objects=15, canvas=10, conv_channels=2, task_channels=2,
                       spatial_channels=2, embed=4, fc=4, hidden=4)
    skill = (skill_init(scfg, 0), scfg)
    bad = MetaConfig(heads=(3, 4))
    with pytest.raises(ValueError):
        make_baseline("ours", skill, (meta_init(bad, 0), bad))
    with pytest.raises(ValueError):
        make_baseline("flat", meta_ckpt=(meta_init(bad, 0), bad))


# ---------------------------------------------------------------- harness

SPLIT = build_split("independent", 0.2, 0)
SMALL = WorldConfig(height=6, width=6, wall_density=0.05, water_density=0.05, object_density=0.1, episode_limit=60)


def test_report_shape_and_outputs(tmp_path):
    agents = [make_baseline("shortest_path"), make_baseline("noop")]
    rep = evaluate(agents, SPLIT, [1, 3], 4, seed=0, world=SMALL)
    assert len(rep.rows) == 2 * 2 * 2
    noop = rep.row("noop", 3, True)
    assert noop.success_rate == 0.0 and noop.mean_steps == SMALL.episode_limit and noop.episodes == 4
    assert rep.row("shortest_path", 1, False).success_rate == 1.0
    rep.save(tmp_path)
    assert len((tmp_path / "report.jsonl").read_text().splitlines()) == 8
    plot = json.loads((tmp_path / "plot_data.json").read_text())
    assert [c for c, _ in plot["noop"]["seen"]["success_rate"]] == [1, 3]
    assert "shortest_path" in (tmp_path / "report.txt").read_text()
    with pytest.raises(KeyError):
        rep.row("random", 1, False)


def test_agents_share_paired_episodes():
    a = episode_specs(SPLIT, 4, True, 5, seed=3, world=SMALL)
    b = episode_specs(SPLIT, 4, True, 5, seed=3, world=SMALL)
    assert a == b
    assert episode_specs(SPLIT, 4, False, 5, seed=3, world=SMALL) != a
    rep = evaluate({"x": make_baseline("shortest_path"), "y": make_baseline("shortest_path")}, SPLIT, [2], 3,
                   seed=1, world=SMALL)
    assert rep.row("x", 2, False).__dict__ | {"agent": "y"} == rep.row("y", 2, False).__dict__


def test_evaluate_validates_arguments():
    with pytest.raises(ValueError):
        evaluate([make_baseline("noop")], SPLIT, [0], 3)
    with pytest.raises(ValueError):
        evaluate([make_baseline("noop")], SPLIT, [1], 0)


def test_eval_world_preset():
    assert (EVAL_WORLD.height, EVAL_WORLD.width, EVAL_WORLD.episode_limit) == (10, 10, 600)
