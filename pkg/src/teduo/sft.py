"""Supervised fine-tuning records from solved abstract MDPs.

Each record pairs a goal and an initial abstract state with the action
sequence the greedy policy produces when rolled through the empirical
transition model until the reward proxy fires.
"""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gridworld as gw
from .abstraction import AbstractDataset, abstract_text
from .goals import Goal, is_goal_state, render
from .offline_rl import EmpiricalTransitions, NotInCoverageError, TabularPolicy

DISCARD_REASONS = ("coverage", "loop", "max_len")


@dataclass(frozen=True)
class SftRecord:
    goal_id: str
    goal_text: str
    state_text: str
    actions: tuple
    start_id: int
    start_hash: str
    width: int
    height: int

    @property
    def n_g(self) -> int:
        return len(self.actions)


@dataclass
class SftBuild:
    records: list
    discards: Counter = field(default_factory=Counter)
    already_positive: int = 0
    starts: int = 0

    def summary(self) -> dict:
        return {"records": len(self.records), "starts": self.starts,
                "already_positive": self.already_positive,
                "discards": {k: self.discards.get(k, 0) for k in DISCARD_REASONS}}


def state_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def positives_of(proxy, dg: AbstractDataset) -> np.ndarray:
    """Boolean proxy verdict for every state of ``dg``."""
    if not proxy.usable:
        raise ValueError("proxy is degenerate or uncalibrated; goal must be excluded")
    return proxy.predict(dg.states).astype(bool)


def build_sft_records(policy: TabularPolicy, phat: EmpiricalTransitions, positive: np.ndarray,
                      dg: AbstractDataset, starts=None, max_len: int = 500,
                      goal_text: str | None = None) -> SftBuild:
    """Roll the policy from each start through the most likely successors.

    ``positive[i]`` is the proxy verdict for state id ``i``.  Starts default
    to every state that appears as a source in ``dg``.
    """
    goal = dg.goal
    text = goal_text or render(goal)
    starts = dg.source_ids() if starts is None else starts
    out = SftBuild([])
    for s0 in (int(s) for s in starts):
        out.starts += 1
        if positive[s0]:
            out.already_positive += 1
            continue
        s, visited, actions, reason = s0, {s0}, [], None
        while True:
            try:
                a = policy.action_id(s)
                s2 = phat.mode_id(s, a)
            except NotInCoverageError:
                reason = "coverage"
                break
            actions.append(a)
            if positive[s2]:
                break
            if s2 in visited:
                reason = "loop"
                break
            if len(actions) >= max_len:
                reason = "max_len"
                break
            visited.add(s2)
            s = s2
        if reason:
            out.discards[reason] += 1
            continue
        rep = dg.representatives[s0]
        stext = abstract_text(dg.states[s0], goal)
        out.records.append(SftRecord(goal.id, text, stext, tuple(actions), s0, state_hash(stext),
                                     rep.width, rep.height))
    return out


def replay_succeeds(record: SftRecord, raw_start: gw.GridState, goal: Goal) -> bool:
    """Whether the actions drive the real simulator into a goal state."""
    x = raw_start
    for a in record.actions:
        x = gw.step(x, a)[0]
        if is_goal_state(x, goal):
            return True
    return False


# -- prompt files -------------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    system: str = ("You are a Reinforcement learning agent in the minigrid environment. You select "
                   "the sequence of optimal actions to achieve the GOAL. Always answer as "
                   "helpfully as possible, while being truthful.")
    user: str = ("The state of the environment is given by the STATE. The environment is a "
                 "{width} by {height} tiles grid. The possible actions are {{ 0: turn left, 1: "
                 "turn right, 2: move forward in the direction faced by the agent, 3: pick up an "
                 "object, 4: drop an object, 5: toggle/activate an object, 6: done completing the "
                 "task}}. \nYou only output the list of numbers associated with the optimal "
                 "sequence of action to achieve the GOAL.\n\nSTATE : {state}\n\nGOAL : {goal}.")
    wrapper: str = ("<|begin_of_text|><|start_header_id|>system<|end_header_id|>{system}<|eot_id|>"
                    "<|start_header_id|>user<|end_header_id|>{user}<|eot_id|>"
                    "<|start_header_id|>assistant<|end_header_id|>")

    def prompt(self, goal_text: str, state_text: str, width: int, height: int) -> str:
        user = self.user.format(width=width, height=height, state=state_text, goal=goal_text)
        return self.wrapper.format(system=self.system, user=user)


def render_actions(actions) -> str:
    return "[" + ", ".join(str(int(a)) for a in actions) + "]"


def parse_actions(text: str) -> list:
    m = re.fullmatch(r"\s*\[([\d,\s]*)\]\s*", text)
    if not m:
        raise ValueError(f"not an action list: {text!r}")
    body = m[1].strip()
    return [int(t) for t in body.split(",")] if body else []


_PROMPT_RE = re.compile(r"STATE : (?P<state>.*)\n\nGOAL : (?P<goal>.*)\.<\|eot_id\|>", re.S)


def parse_line(line: str) -> tuple[str, str, list]:
    """``(goal_text, state_text, actions)`` from one emitted JSONL line."""
    rec = json.loads(line)
    m = _PROMPT_RE.search(rec["prompt"])
    if not m:
        raise ValueError("prompt does not follow the template")
    return m["goal"], m["state"], parse_actions(rec["completion"])


def emit_jsonl(records, template: PromptTemplate | None, path, variant: str = "canonical",
               seed: int = 0) -> int:
    """Write one ``{prompt, completion}`` object per record; returns the count.

    ``variant="paraphrase"`` swaps each goal text for a paraphrase seeded by
    ``seed`` plus the record's position.
    """
    template = template or PromptTemplate()
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            text = r.goal_text
            if variant == "paraphrase":
                text = render(Goal.from_id(r.goal_id), "paraphrase", seed + n)
            line = {"prompt": template.prompt(text, r.state_text, r.width, r.height),
                    "completion": render_actions(r.actions)}
            fh.write(json.dumps(line, ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def write_manifest(path, per_goal: dict, excluded: dict, config_digest: str,
                   extra: dict | None = None) -> dict:
    """Counts per goal, discard statistics and excluded goals."""
    manifest = {"goals": per_goal, "excluded_goals": excluded, "config_digest": config_digest,
                "total_records": sum(v["records"] for v in per_goal.values())}
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest
