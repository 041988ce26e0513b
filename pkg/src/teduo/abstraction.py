"""Goal-conditioned state abstraction.

An abstract state is a pair ``(phi, phibar)``: ``phi`` holds the features that
decide whether the goal is achieved, ``phibar`` the remaining features needed
to act (walls, obstacles, colorless doors, agent pose).
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import gridworld as gw
from ._validation import check_goal, check_states
from .goals import Goal, manhattan, matches, render
from .gridworld import GridState
from .llm import ABSTRACTION_SYSTEM, ABSTRACTION_USER, ChatClient, parse_selection

logger = logging.getLogger(__name__)

INV_EMPTY, INV_GOAL_OBJECT, INV_GOAL_LOCATION, INV_OBSTACLE = "", "goal object", "goal location", "obstacle"


@dataclass(frozen=True)
class FeatureSelection:
    """Goal-relevant features chosen from an example state.

    Tiles are those of the example; descriptors (``(color, shape)`` with
    ``None`` wildcards) let the selection follow objects across states.
    """

    goal_object_tiles: frozenset = frozenset()
    goal_location_tiles: frozenset = frozenset()
    goal_objects: tuple = ()
    goal_locations: tuple = ()
    target_tile: tuple | None = None

    def is_goal_object(self, item) -> bool:
        return any(matches(item, c, s) for c, s in self.goal_objects)

    def is_goal_location(self, item) -> bool:
        return any(matches(item, c, s) for c, s in self.goal_locations)

    def to_dict(self) -> dict:
        return {"goal object": sorted(map(list, self.goal_object_tiles)),
                "goal location": sorted(map(list, self.goal_location_tiles)),
                "goal_objects": [list(d) for d in self.goal_objects],
                "goal_locations": [list(d) for d in self.goal_locations],
                "target_tile": list(self.target_tile) if self.target_tile else None}

    @classmethod
    def from_dict(cls, d) -> FeatureSelection:
        return cls(frozenset(map(tuple, d["goal object"])), frozenset(map(tuple, d["goal location"])),
                   tuple(tuple(x) for x in d["goal_objects"]),
                   tuple(tuple(x) for x in d["goal_locations"]),
                   tuple(d["target_tile"]) if d.get("target_tile") else None)


def _tiles_of(state: GridState, descs) -> frozenset:
    hits = set()
    for c, s in descs:
        if s == "door":
            hits |= {p for p, d in state.doors if matches(d, c, "door")}
        else:
            hits |= {p for p, o in state.objects if matches(o, c, s)}
    return frozenset(hits)


def select_features(goal: Goal, example_state: GridState) -> FeatureSelection:
    """Rule-based feature selection: every object fitting the goal's descriptors."""
    if goal.kind == "go_to_tile":
        return FeatureSelection(goal_location_tiles=frozenset({goal.tile}), target_tile=goal.tile)
    objs = ((goal.color, goal.shape),)
    locs = ((goal.color2, goal.shape2),) if goal.kind == "put_next" else ()
    return FeatureSelection(_tiles_of(example_state, objs), _tiles_of(example_state, locs),
                            objs, locs)


class LLMFeatureOracle:
    """Feature selection delegated to a chat endpoint.

    Selected tiles are resolved to the exact descriptors of whatever sits on
    them in the example state.
    """

    def __init__(self, client: ChatClient):
        self.client = client

    def prompt(self, goal: Goal, state: GridState) -> str:
        return ABSTRACTION_USER.format(goal=render(goal), width=state.width, height=state.height,
                                       state=gw.textualize(state))

    def __call__(self, goal: Goal, state: GridState) -> FeatureSelection:
        text = self.client.complete(ABSTRACTION_SYSTEM, self.prompt(goal, state))
        tiles = parse_selection(text)

        def descs(ts):
            out = set()
            for t in ts:
                cell = state.cell(t)
                if cell.kind == "object":
                    out.add((cell.obj.color, cell.obj.shape))
                elif cell.kind == "door":
                    out.add((cell.door.color, "door"))
            return tuple(sorted(out))

        target = None
        if goal.kind == "go_to_tile":
            target = goal.tile
        return FeatureSelection(frozenset(tiles["object"]), frozenset(tiles["location"]),
                                descs(tiles["object"]), descs(tiles["location"]), target)


@dataclass(frozen=True)
class AbstractState:
    phi: tuple
    phibar: tuple

    def __hash__(self):
        return self._hash

    @cached_property
    def _hash(self):
        return hash((self.phi, self.phibar))

    @cached_property
    def encoding(self) -> str:
        """Canonical string form; orders states for deterministic tie-breaks."""
        if self.phibar and self.phibar[0] == "raw":
            return repr(self.phi) + "\n" + gw.textualize(self.phibar[1])
        return repr((self.phi, _canon(self.phibar)))


def _canon(phibar):
    return tuple(tuple(sorted(x)) if isinstance(x, frozenset) else x for x in phibar)


# phi layout: (goal_objects, goal_locations, inventory, agent_tile, door_states)
#   goal_objects / goal_locations: sorted tuples of tiles on the grid
#   inventory: tag or None when inventory is not goal-relevant
#   agent_tile: tile or None when the goal is not positional
#   door_states: sorted ((tile, state), ...) of goal doors, open_door goals only
# phibar layout: (walls, obstacles, doors, inventory, agent_tile, agent_dir)


_ROOM_CACHE: dict = {}


def _room_labels(state: GridState) -> dict:
    key = (state.walls, tuple(p for p, _ in state.doors), state.width, state.height)
    labels = _ROOM_CACHE.get(key)
    if labels is not None:
        return labels
    doors = {p for p, _ in state.doors}
    labels, rid = {}, 0
    for c in range(state.width):
        for r in range(state.height):
            p = (c, r)
            if p in labels or p in state.walls or p in doors:
                continue
            queue = deque([p])
            labels[p] = rid
            while queue:
                cur = queue.popleft()
                for dx, dy in gw.DIR_VECTORS:
                    n = (cur[0] + dx, cur[1] + dy)
                    if (n not in labels and state.in_bounds(n) and n not in state.walls
                            and n not in doors):
                        labels[n] = rid
                        queue.append(n)
            rid += 1
    if len(_ROOM_CACHE) > 256:
        _ROOM_CACHE.clear()
    _ROOM_CACHE[key] = labels
    return labels


_REGION_CACHE: dict = {}


def _room_region(state: GridState, labels: dict, room: int) -> frozenset:
    """Tiles of ``room`` plus their 8-neighbourhood (the enclosing walls and doors)."""
    key = (state.walls, state.width, state.height, room)
    region = _REGION_CACHE.get(key)
    if region is None:
        tiles = [p for p, r in labels.items() if r == room]
        region = frozenset((p[0] + dx, p[1] + dy) for p in tiles
                           for dx in (-1, 0, 1) for dy in (-1, 0, 1))
        if len(_REGION_CACHE) > 4096:
            _REGION_CACHE.clear()
        _REGION_CACHE[key] = region
    return region


_WALL_SUBSET_CACHE: dict = {}


def _walls_in(walls: frozenset, region: frozenset) -> frozenset:
    key = (walls, region)
    out = _WALL_SUBSET_CACHE.get(key)
    if out is None:
        out = walls & region
        if len(_WALL_SUBSET_CACHE) > 4096:
            _WALL_SUBSET_CACHE.clear()
        _WALL_SUBSET_CACHE[key] = out
    return out


def abstract(state: GridState, goal: Goal, sel: FeatureSelection,
             room_restriction: bool = True) -> AbstractState:
    """Map a raw state to its goal-conditioned abstract state."""
    kind = goal.kind
    goal_objs, goal_locs, obstacles = [], [], []
    for p, o in state.objects:
        is_obj, is_loc = sel.is_goal_object(o), sel.is_goal_location(o)
        if is_obj:
            goal_objs.append(p)
        if is_loc:
            goal_locs.append(p)
        if not (is_obj or is_loc):
            obstacles.append(p)
    door_goal_states, doors = [], []
    for p, d in state.doors:
        if sel.is_goal_object(d) or sel.is_goal_location(d):
            (goal_objs if sel.is_goal_object(d) else goal_locs).append(p)
            if kind == "open_door":
                door_goal_states.append((p, d.state))
                continue
        doors.append((p, d.state))
    if sel.target_tile is not None:
        goal_locs.append(sel.target_tile)

    inv = INV_EMPTY
    if state.inventory:
        held = state.inventory[0]
        inv = (INV_GOAL_OBJECT if sel.is_goal_object(held)
               else INV_GOAL_LOCATION if sel.is_goal_location(held) else INV_OBSTACLE)

    walls = state.walls
    if room_restriction:
        labels = _room_labels(state)
        room = labels.get(state.agent_pos)
        relevant = goal_objs + goal_locs
        if room is not None and all(labels.get(p) == room for p in relevant):
            region = _room_region(state, labels, room)
            walls = _walls_in(walls, region)
            obstacles = [p for p in obstacles if p in region]
            doors = [d for d in doors if d[0] in region]

    inv_in_phi = kind == "pick_up" or (kind == "go_to_object" and goal.shape != "door")
    positional = goal.is_positional
    phi = (tuple(sorted(goal_objs)), tuple(sorted(goal_locs)),
           inv if inv_in_phi else None,
           state.agent_pos if positional else None,
           tuple(sorted(door_goal_states)))
    phibar = (walls, tuple(sorted(obstacles)), tuple(sorted(doors)),
              None if inv_in_phi else inv,
              None if positional else state.agent_pos,
              state.agent_dir)
    return AbstractState(phi, phibar)


def raw_features(state: GridState, goal: Goal, sel: FeatureSelection) -> AbstractState:
    """No abstraction: goal features in ``phi`` plus the untouched raw state."""
    phi = abstract(state, goal, sel, room_restriction=False).phi
    return AbstractState(phi, ("raw", state))


def phi_goal_achieved(phi: tuple, goal: Goal) -> bool:
    """Goal predicate evaluated on goal-identification features alone."""
    objs, locs, inv, agent, door_states = phi
    kind = goal.kind
    if kind == "go_to_tile":
        return agent == goal.tile
    if kind == "pick_up":
        return inv == INV_GOAL_OBJECT
    if kind == "open_door":
        return any(s == "open" for _, s in door_states)
    if kind == "go_to_object":
        if inv == INV_GOAL_OBJECT:
            return True
        return any(manhattan(agent, p) <= 1 for p in objs)
    return any(p != q and manhattan(p, q) <= 1 for p in objs for q in locs)


def abstract_text(s: AbstractState, goal: Goal | None = None) -> str:
    """Sentence-per-feature rendering of an abstract state."""
    if s.phibar and s.phibar[0] == "raw":
        return gw.textualize(s.phibar[1])
    objs, locs, inv_phi, agent_phi, door_states = s.phi
    walls, obstacles, doors, inv_bar, agent_bar, agent_dir = s.phibar

    def tiles(ts):
        return " ".join(f"({p[0]},{p[1]})" for p in sorted(ts))

    lines = [f"The following tiles are wall: {tiles(walls)}."]
    if obstacles:
        lines.append(f"The following tiles are obstacles : {tiles(obstacles)}.")
    for state_name in ("closed", "locked", "open"):
        ds = [p for p, st in doors if st == state_name]
        if ds:
            lines.append(f"The following tiles are {state_name} doors : {tiles(ds)}.")
    door_state = dict(door_states)
    target = goal.tile if goal is not None and goal.kind == "go_to_tile" else None
    for p in objs:
        if p in door_state:
            lines.append(f"A {door_state[p]} goal door is on the tile ({p[0]},{p[1]}).")
        else:
            lines.append(f"A goal object is on the tile ({p[0]},{p[1]}).")
    for p in locs:
        if p == target:
            lines.append(f"The goal tile is ({p[0]},{p[1]}).")
        else:
            lines.append(f"A goal location is on the tile ({p[0]},{p[1]}).")
    inv = inv_phi if inv_phi is not None else inv_bar
    lines.append(f"Inventory : [{inv}].")
    agent = agent_phi if agent_phi is not None else agent_bar
    lines.append(f"The agent is currently at the tile ({agent[0]},{agent[1]}).")
    lines.append(f"The agent is facing {gw.DIRECTIONS[agent_dir]}.")
    return "\n".join(lines)


class GoalAbstraction(TransformerMixin, BaseEstimator):
    """Transformer mapping raw grid states to abstract states for one goal.

    Parameters
    ----------
    goal : Goal
    oracle : {"rule", "llm"}
        Feature selector.  ``"llm"`` requires ``client``.
    abstract : bool
        When False, states pass through unabstracted (``phi`` is still
        computed so rewards can be learned).
    room_restriction : bool
        Drop content outside the agent's room when every goal-relevant tile
        lies inside it.
    """

    def __init__(self, goal=None, oracle="rule", abstract=True, room_restriction=True,
                 client=None):
        self.goal = goal
        self.oracle = oracle
        self.abstract = abstract
        self.room_restriction = room_restriction
        self.client = client

    def fit(self, X, y=None):
        check_goal(self.goal)
        X = check_states(X)
        if not X:
            raise ValueError("need at least one example state")
        if self.oracle == "rule":
            self.selection_ = select_features(self.goal, X[0])
        elif self.oracle == "llm":
            if self.client is None:
                raise ValueError("oracle='llm' needs a client")
            self.selection_ = LLMFeatureOracle(self.client)(self.goal, X[0])
        else:
            raise ValueError(f"unknown oracle {self.oracle!r}")
        self._cache = {}
        return self

    def transform_one(self, x: GridState) -> AbstractState:
        s = self._cache.get(x)
        if s is None:
            if self.abstract:
                s = abstract(x, self.goal, self.selection_, self.room_restriction)
            else:
                s = raw_features(x, self.goal, self.selection_)
            if len(self._cache) > 500_000:
                self._cache.clear()
            self._cache[x] = s
        return s

    def transform(self, X):
        if not hasattr(self, "selection_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("GoalAbstraction is not fitted yet")
        return [self.transform_one(x) for x in X]

    def text(self, s: AbstractState) -> str:
        return abstract_text(s, self.goal)


@dataclass
class AbstractDataset:
    """Transitions of a raw dataset mapped through one goal's abstraction.

    Abstract states are interned: ``states[i]`` is the state with id ``i``
    and ``src/act/dst`` index into it.  ``representatives[i]`` is the first
    raw state seen mapping to id ``i``.
    """

    goal: Goal
    states: list
    src: np.ndarray
    act: np.ndarray
    dst: np.ndarray
    traj: np.ndarray
    representatives: list
    rewards: np.ndarray | None = None
    stats: dict | None = None

    def __len__(self):
        return len(self.src)

    @cached_property
    def index(self) -> dict:
        return {s: i for i, s in enumerate(self.states)}

    def with_rewards(self, rewards) -> AbstractDataset:
        rewards = np.asarray(rewards, dtype=np.float64)
        if rewards.shape != self.src.shape:
            raise ValueError("one reward per transition required")
        return AbstractDataset(self.goal, self.states, self.src, self.act, self.dst, self.traj,
                               self.representatives, rewards, self.stats)

    def source_ids(self) -> np.ndarray:
        return np.unique(self.src)

    def unique_phi(self) -> int:
        return len({s.phi for s in self.states})


def project_dataset(dataset, goal: Goal, sel: FeatureSelection | None = None,
                    abstraction: GoalAbstraction | None = None) -> AbstractDataset:
    """Map every transition of ``dataset`` through the goal's abstraction.

    Either a fitted ``abstraction`` or a ``sel`` (rule abstraction with room
    restriction) must be given.
    """
    if abstraction is None:
        if sel is None:
            raise ValueError("pass a FeatureSelection or a fitted GoalAbstraction")
        abstraction = GoalAbstraction(goal)
        abstraction.selection_ = sel
        abstraction._cache = {}
    index, states, reps = {}, [], []
    src, act, dst, traj = [], [], [], []
    raw_seen = set()

    def intern(x):
        s = abstraction.transform_one(x)
        i = index.get(s)
        if i is None:
            i = index[s] = len(states)
            states.append(s)
            reps.append(x)
        return i

    for ti, trajectory in enumerate(dataset.trajectories):
        xs = trajectory.states
        ids = [intern(x) for x in xs]
        raw_seen.update(xs)
        src.extend(ids[:-1])
        dst.extend(ids[1:])
        act.extend(trajectory.actions)
        traj.extend([ti] * len(trajectory.actions))
    stats = {"unique_raw": len(raw_seen), "unique_abstract": len(states),
             "unique_phi": len({s.phi for s in states}), "transitions": len(src)}
    out = AbstractDataset(goal, states, np.asarray(src, dtype=np.int64),
                          np.asarray(act, dtype=np.int64), np.asarray(dst, dtype=np.int64),
                          np.asarray(traj, dtype=np.int64), reps, None, stats)
    out.__dict__["index"] = index
    return out
