import json

import numpy as np
import pytest

from oracles import fully_explored, labeled_projection
from teduo import gridworld as gw
from teduo.abstraction import AbstractDataset, AbstractState
from teduo.goals import Goal, is_goal_state, parse_goal_text, render
from teduo.gridworld import Object
from teduo.labeling import RewardProxy
from teduo.offline_rl import fit_empirical_transitions, greedy_policy, q_learning
from teduo.sft import (DISCARD_REASONS, PromptTemplate, SftRecord, build_sft_records,
                       emit_jsonl, parse_actions, parse_line, positives_of, render_actions,
                       replay_succeeds, write_manifest)

GOAL = Goal("go_to_tile", tile=(1, 1))


def hand_dg(n, transitions, positives):
    reps = [gw.empty_room(12, 4, agent_pos=(i + 1, 1)) for i in range(n)]
    states = [AbstractState(((), (), None, (i + 1, 1), ()), ("raw", x))
              for i, x in enumerate(reps)]
    src, act, dst = (np.array(c, dtype=np.int64) for c in zip(*transitions))
    rew = np.array([float(d in positives) for d in dst])
    dg = AbstractDataset(GOAL, states, src, act, dst, np.zeros_like(src), reps, rew)
    pos = np.zeros(n, dtype=bool)
    pos[list(positives)] = True
    return dg, pos


def build(dg, pos, **kw):
    pi = greedy_policy(q_learning(dg), dg.index)
    return build_sft_records(pi, fit_empirical_transitions(dg), pos, dg, **kw)


def test_discard_reasons_are_itemized():
    # 0 -> 1 -> 2 (positive); 3 <-> 4 loop; 5 -> 6 where 6 has no action
    dg, pos = hand_dg(7, [(0, 2, 1), (1, 2, 2), (3, 0, 4), (4, 0, 3), (5, 1, 6)], {2})
    out = build(dg, pos)
    assert [r.actions for r in out.records] == [(2, 2), (2,)]
    assert out.discards == {"loop": 2, "coverage": 1}
    summary = out.summary()
    assert set(summary["discards"]) == set(DISCARD_REASONS)
    assert summary["starts"] == 5 and summary["records"] == 2


def test_max_len_and_already_positive():
    dg, pos = hand_dg(5, [(0, 2, 1), (1, 2, 2), (2, 2, 3), (3, 2, 4), (4, 0, 4)], {4})
    out = build(dg, pos, max_len=2)
    assert out.discards["max_len"] == 2
    assert len(out.records) == 2
    out = build(dg, pos, starts=[4, 3])
    assert out.already_positive == 1 and out.records[0].actions == (2,)


def test_single_step_record_replays():
    x = gw.empty_room(6, 6, agent_pos=(2, 1), agent_dir=3)
    goal = Goal("go_to_tile", tile=(1, 1))
    dg, ab = labeled_projection(fully_explored(x), goal, x)
    pos = np.array([is_goal_state(r, goal) for r in dg.representatives])
    start = dg.index[ab.transform_one(x)]
    out = build(dg, pos, starts=[start])
    rec = out.records[0]
    assert rec.actions == (gw.FORWARD,)
    assert replay_succeeds(rec, x, goal)
    assert rec.goal_text == "go to the tile (1,1)" and (rec.width, rec.height) == (6, 6)


def test_fully_explored_records_all_replay():
    x = gw.empty_room(7, 7, agent_pos=(1, 1), objects=[((3, 3), Object("ball", "red"))])
    for goal in (Goal("go_to_tile", tile=(5, 4)), Goal("go_to_object", "red", "ball")):
        dg, ab = labeled_projection(fully_explored(x), goal, x)
        pos = np.array([is_goal_state(r, goal) for r in dg.representatives])
        out = build(dg, pos)
        assert out.records and not out.discards
        for rec in out.records:
            assert replay_succeeds(rec, dg.representatives[rec.start_id], goal)


def test_template_legend_and_prompt():
    t = PromptTemplate()
    p = t.prompt("go to the tile (5,6)", "STATE TEXT", 22, 22)
    assert "5: toggle/activate an object" in p
    assert "a 22 by 22 tiles grid" in p
    assert p.startswith("<|begin_of_text|>") and p.endswith("<|end_header_id|>")
    assert "\n\nSTATE : STATE TEXT\n\nGOAL : go to the tile (5,6).<|eot_id|>" in p


def test_action_rendering():
    assert render_actions([1, 2, 3]) == "[1, 2, 3]"
    assert render_actions([]) == "[]"
    assert parse_actions("[1, 2, 3]") == [1, 2, 3]
    assert parse_actions(" [] ") == []
    with pytest.raises(ValueError):
        parse_actions("1, 2")


def records():
    goals = [Goal("go_to_tile", tile=(2, 3)), Goal("pick_up", "blue", "key")]
    return [SftRecord(g.id, render(g), f"line one\nline {i}", (i, 2, 6), i, "h", 8, 8)
            for i, g in enumerate(goals)]


def test_emit_round_trip_and_line_count(tmp_path):
    recs = records()
    n = emit_jsonl(recs, None, tmp_path / "sft.jsonl")
    lines = (tmp_path / "sft.jsonl").read_text().splitlines()
    assert n == len(lines) == 2
    for rec, line in zip(recs, lines):
        assert set(json.loads(line)) == {"prompt", "completion"}
        goal_text, state_text, actions = parse_line(line)
        assert (goal_text, state_text, tuple(actions)) == (rec.goal_text, rec.state_text,
                                                           rec.actions)


def test_paraphrase_variant_keeps_goal(tmp_path):
    recs = records()
    emit_jsonl(recs, None, tmp_path / "p.jsonl", variant="paraphrase", seed=4)
    for rec, line in zip(recs, (tmp_path / "p.jsonl").read_text().splitlines()):
        goal_text, _, _ = parse_line(line)
        assert parse_goal_text(goal_text).id == rec.goal_id


def test_manifest_contents(tmp_path):
    per_goal = {"g1": {"records": 3, "discards": {"coverage": 1, "loop": 0, "max_len": 0}}}
    m = write_manifest(tmp_path / "m.json", per_goal, {"g2": "degenerate"}, "abc")
    back = json.loads((tmp_path / "m.json").read_text())
    assert back == m and back["total_records"] == 3
    assert back["excluded_goals"] == {"g2": "degenerate"}


def test_positives_of_rejects_unusable_proxy():
    dg, _ = hand_dg(2, [(0, 0, 1)], set())
    with pytest.raises(ValueError):
        positives_of(RewardProxy().fit([], []), dg)
