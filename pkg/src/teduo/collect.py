"""Unlabeled transition datasets and the policies that generate them."""
from __future__ import annotations

import hashlib
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import gridworld as gw
from .goals import Goal, enumerate_goals, is_goal_state, manhattan, matches
from .gridworld import EnvSpec, GridState

logger = logging.getLogger(__name__)

POLICY_KINDS = ("goal_oriented_bot", "uniform_random")


class UnreachableGoalError(RuntimeError):
    """The planner found no action sequence achieving the goal."""


# -- BFS planner --------------------------------------------------------------

def _nav_plan(state: GridState, target, allow_locked: bool = True):
    """Shortest action list (turns, forward, door toggles) to a pose where
    ``target(pos, dir)`` holds.  Objects are treated as obstacles; doors are
    only ever opened, never closed."""
    walls, objs, doors = state.walls, state.object_map, state.door_map
    held = state.inventory[0] if state.inventory else None
    start_open = frozenset(p for p, d in doors.items() if d.is_open)
    start = (state.agent_pos, state.agent_dir, start_open)
    if target(start[0], start[1]):
        return []
    prev = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        pos, d, opened = node
        dx, dy = gw.DIR_VECTORS[d]
        front = (pos[0] + dx, pos[1] + dy)
        succ = [((pos, (d - 1) % 4, opened), gw.TURN_LEFT),
                ((pos, (d + 1) % 4, opened), gw.TURN_RIGHT)]
        if front not in walls and front not in objs and state.in_bounds(front):
            door = doors.get(front)
            if door is None or front in opened:
                succ.append(((front, d, opened), gw.FORWARD))
            elif door.state == "closed" or (
                    allow_locked and held is not None and held.shape == "key"
                    and held.color == door.color):
                succ.append(((pos, d, opened | {front}), gw.TOGGLE))
        for nxt, action in succ:
            if nxt in prev:
                continue
            prev[nxt] = (node, action)
            if target(nxt[0], nxt[1]):
                actions = []
                cur = nxt
                while prev[cur] is not None:
                    cur, a = prev[cur]
                    actions.append(a)
                return actions[::-1]
            queue.append(nxt)
    return None


def _front(pos, d):
    dx, dy = gw.DIR_VECTORS[d]
    return (pos[0] + dx, pos[1] + dy)


def plan(state: GridState, goal: Goal) -> list:
    """Action sequence driving ``state`` toward ``goal``.

    Multi-phase goals (drop what is held, fetch a key, pick up then place)
    return only the plan for the current phase; callers replan afterwards.
    """
    if is_goal_state(state, goal):
        return [gw.DONE]
    objs, doors = state.object_map, state.door_map
    held = state.inventory[0] if state.inventory else None

    def facing_empty(pos, d):
        f = _front(pos, d)
        return state.in_bounds(f) and state.cell(f).kind == "empty" and f != pos

    def need(seq):
        if seq is None:
            raise UnreachableGoalError(goal.id)
        return seq

    def drop_first():
        return need(_nav_plan(state, facing_empty)) + [gw.DROP]

    kind = goal.kind
    if kind == "go_to_tile":
        t = goal.tile
        return need(_nav_plan(state, lambda p, d: p == t))
    if kind == "go_to_object":
        if goal.shape == "door":
            tiles = [p for p, dr in doors.items() if matches(dr, goal.color, "door")]
        else:
            tiles = [p for p, o in objs.items() if matches(o, goal.color, goal.shape)]
        if not tiles:
            raise UnreachableGoalError(goal.id)
        return need(_nav_plan(state, lambda p, d: any(manhattan(p, t) <= 1 for t in tiles)))
    if kind == "pick_up":
        if held is not None:
            return drop_first()
        tiles = {p for p, o in objs.items() if matches(o, goal.color, goal.shape)}
        return need(_nav_plan(state, lambda p, d: _front(p, d) in tiles)) + [gw.PICKUP]
    if kind == "open_door":
        targets = {p: dr for p, dr in doors.items() if matches(dr, goal.color, "door")}
        usable = {p for p, dr in targets.items() if dr.state == "closed" or (
            held is not None and held.shape == "key" and held.color == dr.color)}
        if usable:
            return need(_nav_plan(state, lambda p, d: _front(p, d) in usable)) + [gw.TOGGLE]
        for p, dr in sorted(targets.items()):
            if dr.state == "locked":
                try:
                    return plan(state, Goal("pick_up", dr.color, "key"))
                except UnreachableGoalError:
                    continue
        raise UnreachableGoalError(goal.id)
    # put_next
    if held is not None and matches(held, goal.color, goal.shape):
        anchors = [p for p, o in objs.items() if matches(o, goal.color2, goal.shape2)]
        if not anchors:
            raise UnreachableGoalError(goal.id)

        def beside(p, d):
            f = _front(p, d)
            return facing_empty(p, d) and any(manhattan(f, t) == 1 for t in anchors)
        return need(_nav_plan(state, beside)) + [gw.DROP]
    if held is not None:
        return drop_first()
    tiles = {p for p, o in objs.items() if matches(o, goal.color, goal.shape)}
    return need(_nav_plan(state, lambda p, d: _front(p, d) in tiles)) + [gw.PICKUP]


def goal_oriented_bot(state: GridState, hidden_goal: Goal) -> int:
    """Next action of the BFS planner; raises :class:`UnreachableGoalError`."""
    return plan(state, hidden_goal)[0]


class BFSBot:
    """Goal-reaching bot following the current shortest plan.

    The plan is recomputed whenever the observed state differs from the one
    the plan predicted, which in a deterministic simulator gives the same
    behaviour as replanning at every step.
    """

    def __init__(self, goal: Goal):
        self.goal = goal
        self._plan: list = []
        self._expected = None

    def act(self, state: GridState) -> int:
        if not self._plan or state != self._expected:
            self._plan = plan(state, self.goal)
            self._expected = state
        action = self._plan.pop(0)
        self._expected = gw.step(state, action)[0]
        return action


# -- datasets ----------------------------------------------------------------

@dataclass
class Trajectory:
    x0: GridState
    actions: tuple
    policy: str = ""

    @cached_property
    def states(self) -> list:
        return gw.replay(self.x0, self.actions)

    def transitions(self):
        s = self.states
        for t, a in enumerate(self.actions):
            yield s[t], a, s[t + 1]

    def __len__(self):
        return len(self.actions)


@dataclass
class TransitionDataset:
    trajectories: list
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return sum(len(t) for t in self.trajectories)

    def transitions(self):
        """Flattened ``(x, a, x')`` view."""
        for traj in self.trajectories:
            yield from traj.transitions()

    def prefix(self, fraction: float) -> TransitionDataset:
        """Leading trajectories holding at least ``fraction`` of all transitions."""
        need = fraction * len(self)
        out, total = [], 0
        for traj in self.trajectories:
            if total >= need and out:
                break
            out.append(traj)
            total += len(traj)
        return TransitionDataset(out, dict(self.metadata, fraction=fraction))

    def to_lines(self) -> list:
        lines = [json.dumps(self.metadata, sort_keys=True)]
        for traj in self.trajectories:
            lines.append(json.dumps({"x0_text": gw.textualize(traj.x0),
                                     "actions": list(traj.actions),
                                     "policy": traj.policy}, sort_keys=True))
        return lines

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> TransitionDataset:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        meta = json.loads(lines[0])
        trajs = []
        for line in lines[1:]:
            if not line.strip():
                continue
            rec = json.loads(line)
            actions = tuple(int(a) for a in rec["actions"])
            if any(a not in gw.ACTIONS for a in actions):
                raise ValueError("dataset contains an unknown action code")
            trajs.append(Trajectory(gw.parse_state(rec["x0_text"]), actions,
                                    rec.get("policy", "")))
        return cls(trajs, meta)

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.to_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()


@dataclass(frozen=True)
class CollectionPolicyMix:
    components: tuple = (("goal_oriented_bot", 1.0),)
    step_cap: int = 500
    random_episode_len: int | None = None
    goal_pool: tuple | None = None

    def __post_init__(self):
        comps = tuple((str(k), float(w)) for k, w in self.components)
        object.__setattr__(self, "components", comps)
        for k, w in comps:
            if k not in POLICY_KINDS:
                raise ValueError(f"unknown policy kind {k!r}")
            if w < 0:
                raise ValueError("mixture weights must be non-negative")
        if not comps or abs(sum(w for _, w in comps) - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")


def spec_digest(specs: Sequence[EnvSpec]) -> str:
    blob = json.dumps([s.to_dict() for s in specs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def collect(env: EnvSpec | Sequence[EnvSpec], mix: CollectionPolicyMix, budget: int,
            seed: int) -> TransitionDataset:
    """Roll out the mixture policy until ``budget`` transitions are gathered.

    The final trajectory is cut at the budget so the dataset holds exactly
    ``budget`` transitions.  Hidden goals are never recorded.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    specs = [env] if isinstance(env, EnvSpec) else list(env)
    rng = np.random.default_rng(seed)
    kinds = [k for k, _ in mix.components]
    weights = np.array([w for _, w in mix.components])
    pools: dict = {}
    trajectories, total, fallbacks = [], 0, 0
    while total < budget:
        spec_idx = int(rng.integers(len(specs)))
        spec = specs[spec_idx]
        x = gw.generate_env(spec, int(rng.integers(2**31)))
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        limit = min(mix.step_cap, budget - total)
        actions = []
        bot = None
        if kind == "goal_oriented_bot":
            if mix.goal_pool is not None:
                pool = list(mix.goal_pool)
            else:
                key = (spec_idx, x.walls, x.doors, x.objects)
                pool = pools.setdefault(key, enumerate_goals(x))
            goal = pool[int(rng.integers(len(pool)))]
            bot = BFSBot(goal)
        else:
            limit = min(mix.random_episode_len or mix.step_cap, limit)
        x0 = x
        while len(actions) < limit:
            if bot is not None:
                try:
                    a = bot.act(x)
                except UnreachableGoalError:
                    logger.info("bot cannot reach %s; episode continues at random", bot.goal.id)
                    fallbacks += 1
                    bot = None
                    continue
            else:
                a = int(rng.integers(gw.N_ACTIONS))
            actions.append(a)
            x = gw.step(x, a)[0]
            if bot is not None and is_goal_state(x, bot.goal):
                break
        trajectories.append(Trajectory(x0, tuple(actions), kind))
        total += len(actions)
    meta = {"env_digest": spec_digest(specs), "mix": [list(c) for c in mix.components],
            "step_cap": mix.step_cap, "budget": budget, "seed": seed,
            "n_trajectories": len(trajectories), "bot_fallbacks": fallbacks}
    return TransitionDataset(trajectories, meta)


def visited_goals(dataset: TransitionDataset | Iterable, goals: Iterable[Goal]) -> set:
    """Goals whose reward indicator fires on at least one transition."""
    if isinstance(dataset, TransitionDataset):
        successors = {x2 for _, _, x2 in dataset.transitions()}
    else:
        successors = {x2 for _, _, x2 in dataset}
    found = set()
    for g in goals:
        if any(is_goal_state(s, g) for s in successors):
            found.add(g)
    return found
