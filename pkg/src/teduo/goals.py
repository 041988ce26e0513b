"""Goal grammar, ground-truth goal predicate, natural-language rendering."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .gridworld import COLORS, SHAPES, GridState, Object

KINDS = ("go_to_tile", "go_to_object", "pick_up", "open_door", "put_next")
TARGET_SHAPES = SHAPES + ("door",)

FORMULATIONS = {
    "go_to_tile": ("Move to the location at the coordinate {t}", "Reach the position at {t}",
                   "Navigate to the point {t}"),
    "pick_up": ("Grab a {x}", "Acquire a {x}", "collect a {x}"),
    "go_to_object": ("Move to a {x}", "Reach a {x}", "Navigate to a {x}"),
    "open_door": ("Push a {x} open", "Swing open a {x}"),
    "put_next": ("Set a {x} and a {y} next to each other", "Position a {x} alongside a {y}",
                 "Place a {x} beside a {y}"),
}
SHAPE_SYNONYMS = {
    "box": ("container", "crate", "chest"),
    "key": ("passcode", "lock-opener", "unlocker"),
    "ball": ("sphere", "globe", "orb"),
    "door": ("portal", "gate", "hatch"),
}
COLOR_SYNONYMS = {
    "blue": ("azure", "cobalt", "navy"),
    "red": ("scarlet", "crimson", "ruby"),
    "green": ("emerald", "jade", "lime"),
    "yellow": ("golden", "amber", "canary"),
    "purple": ("violet", "lavender", "mauve"),
    "grey": ("ash", "charcoal", "silver"),
}


class GoalSizeError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Goal:
    """A structured goal.  ``None`` color (or shape) means "any"."""

    kind: str
    color: str | None = None
    shape: str | None = None
    tile: tuple | None = None
    color2: str | None = None
    shape2: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown goal kind {self.kind!r}")
        for c in (self.color, self.color2):
            if c is not None and c not in COLORS:
                raise ValueError(f"unknown color {c!r}")
        if self.kind == "go_to_tile" and self.tile is None:
            raise ValueError("go_to_tile needs a tile")
        if self.kind == "pick_up" and self.shape not in SHAPES:
            raise ValueError("pick_up needs an object shape")
        if self.kind == "go_to_object" and self.shape not in TARGET_SHAPES + (None,):
            raise ValueError(f"bad target shape {self.shape!r}")
        if self.kind == "open_door":
            object.__setattr__(self, "shape", "door")
        if self.kind == "put_next" and (self.shape not in SHAPES or self.shape2 not in SHAPES):
            raise ValueError("put_next needs two object shapes")
        if self.tile is not None:
            object.__setattr__(self, "tile", tuple(self.tile))

    @property
    def id(self) -> str:
        if self.kind == "go_to_tile":
            return f"go_to_tile({self.tile[0]},{self.tile[1]})"
        a = f"{self.color or '*'},{self.shape or '*'}"
        if self.kind == "put_next":
            return f"put_next({a},{self.color2 or '*'},{self.shape2})"
        return f"{self.kind}({a})"

    @property
    def args(self) -> dict:
        keys = {"go_to_tile": ("tile",), "go_to_object": ("color", "shape"),
                "pick_up": ("color", "shape"), "open_door": ("color",),
                "put_next": ("color", "shape", "color2", "shape2")}[self.kind]
        return {k: (list(getattr(self, k)) if k == "tile" else getattr(self, k)) for k in keys}

    @property
    def is_positional(self) -> bool:
        return self.kind in ("go_to_tile", "go_to_object")

    @classmethod
    def from_id(cls, gid: str) -> Goal:
        m = re.fullmatch(r"(\w+)\((.*)\)", gid)
        if not m:
            raise ValueError(f"bad goal id {gid!r}")
        kind, parts = m[1], [None if p == "*" else p for p in m[2].split(",")]
        if kind == "go_to_tile":
            return cls(kind, tile=(int(parts[0]), int(parts[1])))
        if kind == "put_next":
            return cls(kind, parts[0], parts[1], color2=parts[2], shape2=parts[3])
        return cls(kind, parts[0], parts[1])

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "args": self.args,
                "canonical_text": render(self)}


def matches(item, color: str | None, shape: str | None) -> bool:
    """Whether an ``Object`` or ``Door`` fits a (color, shape) descriptor."""
    item_shape = getattr(item, "shape", "door")
    if shape is None:
        if item_shape == "door":
            return False
    elif item_shape != shape:
        return False
    return color is None or item.color == color


def manhattan(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def is_goal_state(state: GridState, goal: Goal) -> bool:
    """Ground-truth membership of ``state`` in the goal set of ``goal``."""
    kind = goal.kind
    if kind == "go_to_tile":
        return state.agent_pos == goal.tile
    if kind == "pick_up":
        return any(matches(o, goal.color, goal.shape) for o in state.inventory)
    if kind == "open_door":
        return any(d.is_open and matches(d, goal.color, "door") for _, d in state.doors)
    if kind == "go_to_object":
        if goal.shape == "door":
            return any(manhattan(p, state.agent_pos) <= 1 and matches(d, goal.color, "door")
                       for p, d in state.doors)
        if any(matches(o, goal.color, goal.shape) for o in state.inventory):
            return True
        return any(manhattan(p, state.agent_pos) <= 1 and matches(o, goal.color, goal.shape)
                   for p, o in state.objects)
    # put_next: both objects on the grid
    first = [p for p, o in state.objects if matches(o, goal.color, goal.shape)]
    second = [p for p, o in state.objects if matches(o, goal.color2, goal.shape2)]
    return any(p != q and manhattan(p, q) <= 1 for p in first for q in second)


def reward(x: GridState, a: int, x2: GridState, goal: Goal) -> int:
    """Sparse reward: 1 iff the successor state achieves ``goal``."""
    return int(is_goal_state(x2, goal))


# -- rendering ---------------------------------------------------------------

def _np(color, shape) -> str:
    noun = shape or "object"
    return f"the {color} {noun}" if color else f"a {noun}"


def render(goal: Goal, variant: str = "canonical", seed: int | None = None) -> str:
    """Canonical BabyAI phrasing, or a seeded paraphrase built from synonym tables."""
    if variant == "canonical":
        if goal.kind == "go_to_tile":
            return f"go to the tile ({goal.tile[0]},{goal.tile[1]})"
        if goal.kind == "go_to_object":
            return f"go to {_np(goal.color, goal.shape)}"
        if goal.kind == "pick_up":
            return f"pick up {_np(goal.color, goal.shape)}"
        if goal.kind == "open_door":
            return f"open {_np(goal.color, 'door')}"
        return f"put {_np(goal.color, goal.shape)} next to {_np(goal.color2, goal.shape2)}"
    if variant != "paraphrase":
        raise ValueError(f"unknown variant {variant!r}")
    if seed is None:
        raise ValueError("paraphrase needs a seed")
    rng = np.random.default_rng([seed, *goal.id.encode()])

    def pick(options):
        return options[int(rng.integers(len(options)))]

    def phrase(color, shape):
        noun = pick(SHAPE_SYNONYMS[shape]) if shape else "object"
        return f"{pick(COLOR_SYNONYMS[color])} {noun}" if color else noun

    template = pick(FORMULATIONS[goal.kind])
    if goal.kind == "go_to_tile":
        return template.format(t=f"({goal.tile[0]},{goal.tile[1]})")
    if goal.kind == "put_next":
        return template.format(x=phrase(goal.color, goal.shape),
                               y=phrase(goal.color2, goal.shape2))
    return template.format(x=phrase(goal.color, goal.shape))


_COLOR_WORDS = {c: c for c in COLORS} | {s: c for c, syn in COLOR_SYNONYMS.items() for s in syn}
_SHAPE_WORDS = {s: s for s in TARGET_SHAPES} | {w: s for s, syn in SHAPE_SYNONYMS.items()
                                                for w in syn}
_SHAPE_WORDS["object"] = None


def _parse_np(text: str):
    words = text.strip().split()
    if words and words[0] in ("a", "an", "the"):
        words = words[1:]
    if len(words) == 2 and words[0] in _COLOR_WORDS and words[1] in _SHAPE_WORDS:
        return _COLOR_WORDS[words[0]], _SHAPE_WORDS[words[1]]
    if len(words) == 1 and words[0] in _SHAPE_WORDS:
        return None, _SHAPE_WORDS[words[0]]
    raise ValueError(f"cannot parse noun phrase {text!r}")


_PARSERS = [
    (r"(?:go to the tile|move to the location at the coordinate|reach the position at|"
     r"navigate to the point) \((\d+),(\d+)\)", "go_to_tile"),
    (r"(?:put|set|position|place) (.+?) (?:next to|and|alongside|beside) (.+?)"
     r"(?: next to each other)?", "put_next"),
    (r"(?:pick up|grab|acquire|collect) (.+)", "pick_up"),
    (r"(?:open|swing open) (.+)", "open_door"),
    (r"push (.+) open", "open_door"),
    (r"(?:go to|move to|reach|navigate to) (.+)", "go_to_object"),
]


def parse_goal_text(text: str) -> Goal:
    """Recover the structured goal from canonical or paraphrased text."""
    t = text.strip().rstrip(".").lower()
    for pattern, kind in _PARSERS:
        m = re.fullmatch(pattern, t)
        if not m:
            continue
        if kind == "go_to_tile":
            return Goal(kind, tile=(int(m[1]), int(m[2])))
        if kind == "put_next":
            (c1, s1), (c2, s2) = _parse_np(m[1]), _parse_np(m[2])
            return Goal(kind, c1, s1, color2=c2, shape2=s2)
        color, shape = _parse_np(m[1])
        if kind == "open_door":
            if shape != "door":
                raise ValueError(f"open goal must target a door: {text!r}")
            return Goal(kind, color)
        return Goal(kind, color, shape)
    raise ValueError(f"cannot parse goal text {text!r}")


# -- goal sets ---------------------------------------------------------------

def enumerate_goals(state: GridState, tiles: Iterable | None = None,
                    put_next: bool = True) -> list:
    """Goals instantiable on ``state``'s layout, sorted by id."""
    goals = set()
    descs = {(o.color, o.shape) for o in state.all_objects()}
    for color, shape in descs:
        for c in (color, None):
            goals.add(Goal("go_to_object", c, shape))
            goals.add(Goal("pick_up", c, shape))
    for _, d in state.doors:
        for c in (d.color, None):
            goals.add(Goal("go_to_object", c, "door"))
            goals.add(Goal("open_door", c))
    if put_next:
        objs = state.all_objects()
        for i, a in enumerate(objs):
            for j, b in enumerate(objs):
                if i != j and (a.color, a.shape) != (b.color, b.shape) or (i < j and a == b):
                    goals.add(Goal("put_next", a.color, a.shape, color2=b.color, shape2=b.shape))
    for t in tiles or ():
        goals.add(Goal("go_to_tile", tile=tuple(t)))
    return sorted(goals, key=lambda g: g.id)


@dataclass(frozen=True)
class GoalSplit:
    train: tuple
    test: tuple

    def test_texts(self, seed: int) -> list:
        return [render(g, "paraphrase", seed) for g in self.test]


def split_goals(goals: Iterable[Goal], seed: int, n_train: int = 500,
                n_test: int = 100) -> GoalSplit:
    """Disjoint random train/test split of ``goals``."""
    pool = sorted(set(goals), key=lambda g: g.id)
    if len(pool) < 2:
        raise GoalSizeError("need at least two goals to split")
    if n_train + n_test > len(pool) or n_train < 0 or n_test < 0:
        raise GoalSizeError(f"requested {n_train}+{n_test} goals from {len(pool)}")
    order = np.random.default_rng(seed).permutation(len(pool))
    picked = [pool[i] for i in order]
    return GoalSplit(tuple(picked[:n_train]), tuple(picked[n_train:n_train + n_test]))


def write_goals(goals: Iterable[Goal], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in goals:
            fh.write(json.dumps(g.to_json(), sort_keys=True) + "\n")


def read_goals(path) -> list:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(Goal.from_id(json.loads(line)["id"]))
    return out


def goal_matches_object(goal: Goal, obj: Object) -> bool:
    return matches(obj, goal.color, goal.shape)
