import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import adjacent_tiles, bfs_distance, fully_explored, labeled_projection
from teduo import gridworld as gw
from teduo.evaluation import (NO_ACTION, AbstractAgent, BotAgent, ConstantAgent, EpisodeAborted,
                              MetricsReport, NullAgent, StateSpaceTooLarge, build_suite,
                              evaluate, format_table, reachable_initial_states, recount, rollout,
                              suite_cells, to_csv)
from teduo.goals import Goal
from teduo.gridworld import EnvSpec, Object
from teduo.llm import TransportError
from teduo.offline_rl import NotInCoverageError, greedy_policy, q_learning


class Unmarked:
    """Same actions as ``inner`` but without the stationarity promise."""

    stationary = False

    def __init__(self, inner):
        self.inner = inner

    def act(self, state, step):
        return self.inner.act(state, step)


def test_cap_binds_on_failure():
    x = gw.empty_room(5, 5, agent_pos=(1, 1), agent_dir=0)
    out = rollout(x, ConstantAgent(gw.FORWARD), Goal("go_to_tile", tile=(3, 3)), cap=7)
    assert not out.success and out.steps == 7
    assert out.total_actions == 7 and out.invalid_count == 7


def test_success_at_step_zero():
    x = gw.empty_room(5, 5, agent_pos=(3, 3))
    out = rollout(x, NullAgent(), Goal("go_to_tile", tile=(3, 3)))
    assert out.success and out.steps == 0 and out.total_actions == 0


def test_coverage_miss_is_invalid_noop():
    x = gw.empty_room(5, 5)
    out = rollout(x, NullAgent(), Goal("go_to_tile", tile=(3, 3)), cap=10)
    assert out.actions == (NO_ACTION,) * 10 and out.invalid_count == 10


def test_corridor_constant_forward():
    x = gw.empty_room(8, 3, agent_pos=(1, 1), agent_dir=1)
    out = rollout(x, ConstantAgent(gw.FORWARD), Goal("go_to_tile", tile=(5, 1)), cap=50)
    assert out.success and out.steps == 4 and out.invalid_count == 0


def test_two_of_four_is_fifty_percent():
    x = gw.empty_room(6, 3, agent_pos=(1, 1), agent_dir=1)
    suite = [(Goal("go_to_tile", tile=(c, 1)), x) for c in (2, 3)]
    suite += [(Goal("go_to_tile", tile=(c, 1)), gw.step(x, gw.TURN_LEFT)[0]) for c in (2, 3)]
    rep = evaluate(suite, lambda g: ConstantAgent(gw.FORWARD), cap=10)
    assert rep.n == 4 and rep.success_rate == 0.5
    assert rep.mean_episode_length == (1 + 2 + 10 + 10) / 4
    assert rep.invalid_ratio == 20 / 23


def test_transport_failure_aborts_episode():
    class Broken:
        def act(self, state, step):
            raise TransportError("down")

    x = gw.empty_room(5, 5)
    with pytest.raises(EpisodeAborted):
        rollout(x, Broken(), Goal("go_to_tile", tile=(3, 3)))
    rep = evaluate([(Goal("go_to_tile", tile=(3, 3)), x)] * 2 +
                   [(Goal("go_to_tile", tile=(1, 1)), x)],
                   lambda g: Broken() if g.tile == (3, 3) else NullAgent())
    assert rep.aborted == 2 and rep.n == 1 and rep.success_rate == 1.0


@st.composite
def episodes(draw):
    spec = draw(st.sampled_from([EnvSpec(1, 1, 4), EnvSpec(2, 2, 3)]))
    x = gw.generate_env(spec, draw(st.integers(0, 5000)))
    goal = Goal("go_to_tile", tile=(draw(st.integers(1, 3)), draw(st.integers(1, 3))))
    table = draw(st.lists(st.integers(-1, 6), min_size=4, max_size=4))
    return x, goal, table, draw(st.integers(1, 60))


class PoseAgent:
    """Stationary lookup keyed by the agent direction; -1 means no action."""

    stationary = True

    def __init__(self, table):
        self.table = table

    def act(self, state, step):
        a = self.table[state.agent_dir]
        if a < 0:
            raise NotInCoverageError(state)
        return a


@settings(max_examples=200, deadline=None, derandomize=True)
@given(episodes())
def test_cycle_shortcut_matches_full_simulation_and_recount(ep):
    x, goal, table, cap = ep
    fast = rollout(x, PoseAgent(table), goal, cap)
    slow = rollout(x, Unmarked(PoseAgent(table)), goal, cap)
    assert fast == slow
    assert recount(fast, goal, cap) == fast


def test_bot_is_bfs_optimal():
    x = gw.empty_room(7, 7, agent_pos=(1, 1), agent_dir=0,
                      objects=[((3, 3), Object("box", "red")), ((4, 2), Object("key", "blue"))])
    blocked = {(3, 3), (4, 2)}
    for tile in [(5, 5), (1, 5), (5, 1), (2, 3)]:
        out = rollout(x, BotAgent(Goal("go_to_tile", tile=tile)), Goal("go_to_tile", tile=tile))
        assert out.success and out.steps == bfs_distance(7, 7, blocked, (1, 1, 0), {tile})
    goal = Goal("go_to_object", "red", "box")
    out = rollout(x, BotAgent(goal), goal)
    assert out.steps == bfs_distance(7, 7, blocked, (1, 1, 0), adjacent_tiles((3, 3), 7, 7,
                                                                             blocked))


def test_reachable_initial_states():
    x = gw.empty_room(5, 5, agent_pos=(1, 1))
    goal = Goal("go_to_tile", tile=(3, 3))
    # 9 tiles x 4 directions, minus the 4 goal poses
    assert reachable_initial_states(BotAgent(goal), goal, x) == 32
    assert reachable_initial_states(NullAgent(), goal, x) == 0
    dg, ab = labeled_projection(fully_explored(x), goal, x)
    agent = AbstractAgent(ab, greedy_policy(q_learning(dg), dg.index))
    assert reachable_initial_states(agent, goal, x, abstraction=ab) == 32
    with pytest.raises(StateSpaceTooLarge):
        reachable_initial_states(NullAgent(), goal, x, limit=10)


def test_report_serialization_and_tables():
    x = gw.empty_room(5, 5)
    suite = [(Goal("go_to_tile", tile=(1, 1)), x), (Goal("go_to_tile", tile=(3, 3)), x)]
    rep = evaluate(suite, lambda g: BotAgent(g))
    d = json.loads(rep.to_json())
    assert d["n"] == 2 and len(d["outcomes"]) == 2
    again = MetricsReport.from_outcomes(rep.outcomes, rep.cap)
    assert again.summary() == rep.summary()
    assert "Success rate (%)" in format_table({"bot": rep})
    assert to_csv({"bot": rep}).splitlines()[1].startswith("bot,2,1.0")
    with pytest.raises(ValueError):
        evaluate([], lambda g: NullAgent())
    with pytest.raises(ValueError):
        rollout(x, NullAgent(), suite[1][0], cap=0)


def test_suites_are_seeded_and_solvable():
    goals = [Goal("go_to_tile", tile=(1, 1)), Goal("go_to_object", None, "ball")]
    specs = [EnvSpec(2, 2, 3)]
    a = build_suite(goals, specs, 3, 7)
    assert a == build_suite(goals, specs, 3, 7) and len(a) == 6
    for goal, x0 in a:
        assert rollout(x0, BotAgent(goal), goal).success
    # (1,1) holds a key in the held-out layout, so its tile goal has no solvable start there
    cells = suite_cells(goals[:1], goals[1:], specs, [EnvSpec(2, 2, 3, layout_seed=9)], 2, 0)
    assert cells.pop("test_env/train_goals") == []
    assert set(cells) == {"train_env/train_goals", "train_env/test_goals", "test_env/test_goals"}
    assert len({c[0][1] for c in cells.values()}) == 3
    assert np.all([len(v) == 2 for v in cells.values()])
