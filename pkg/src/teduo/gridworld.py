"""Deterministic symbolic grid world with BabyAI-style rooms, doors and objects.

States are immutable values.  ``step`` is a pure function returning the next
state and whether the action had any effect.  Coordinates are ``(col, row)``
with ``(0, 0)`` in the top-left corner; facing "up" decreases the row.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

SHAPES = ("box", "key", "ball")
COLORS = ("blue", "red", "green", "yellow", "purple", "grey")
DOOR_STATES = ("open", "closed", "locked")
DIRECTIONS = ("up", "right", "down", "left")
DIR_VECTORS = ((0, -1), (1, 0), (0, 1), (-1, 0))

TURN_LEFT, TURN_RIGHT, FORWARD, PICKUP, DROP, TOGGLE, DONE = range(7)
ACTIONS = {
    TURN_LEFT: "turn left",
    TURN_RIGHT: "turn right",
    FORWARD: "move forward",
    PICKUP: "pick up",
    DROP: "drop",
    TOGGLE: "toggle",
    DONE: "done",
}
N_ACTIONS = len(ACTIONS)

Pos = tuple[int, int]


class InvalidStateError(ValueError):
    """Raised when a state violates a structural invariant."""


class CapacityError(ValueError):
    """Raised when a layout cannot hold the requested objects."""


@dataclass(frozen=True, order=True)
class Object:
    shape: str
    color: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidStateError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise InvalidStateError(f"unknown color {self.color!r}")

    def describe(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True, order=True)
class Door:
    color: str
    state: str = "closed"

    def __post_init__(self):
        if self.color not in COLORS:
            raise InvalidStateError(f"unknown color {self.color!r}")
        if self.state not in DOOR_STATES:
            raise InvalidStateError(f"unknown door state {self.state!r}")

    @property
    def is_open(self) -> bool:
        return self.state == "open"


@dataclass(frozen=True)
class CellContent:
    kind: str  # empty | wall | door | object
    door: Door | None = None
    obj: Object | None = None


EMPTY = CellContent("empty")
WALL = CellContent("wall")


@dataclass(frozen=True)
class GridState:
    """Full observation of the grid.

    ``doors`` and ``objects`` are tuples of ``(pos, item)`` pairs sorted by
    position, which keeps equality and hashing canonical.
    """

    width: int
    height: int
    walls: frozenset
    doors: tuple = ()
    objects: tuple = ()
    agent_pos: Pos = (1, 1)
    agent_dir: int = 0
    inventory: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "doors", tuple(sorted(self.doors)))
        object.__setattr__(self, "objects", tuple(sorted(self.objects)))
        if not isinstance(self.walls, frozenset):
            object.__setattr__(self, "walls", frozenset(self.walls))

    def __hash__(self):
        return self._hash

    @cached_property
    def _hash(self):
        return hash((self.width, self.height, self.walls, self.doors, self.objects,
                     self.agent_pos, self.agent_dir, self.inventory))

    @cached_property
    def door_map(self) -> dict:
        return dict(self.doors)

    @cached_property
    def object_map(self) -> dict:
        return dict(self.objects)

    @property
    def cells(self) -> dict:
        out = {p: WALL for p in self.walls}
        out.update({p: CellContent("door", door=d) for p, d in self.doors})
        out.update({p: CellContent("object", obj=o) for p, o in self.objects})
        return out

    def cell(self, pos: Pos) -> CellContent:
        if pos in self.walls:
            return WALL
        d = self.door_map.get(pos)
        if d is not None:
            return CellContent("door", door=d)
        o = self.object_map.get(pos)
        if o is not None:
            return CellContent("object", obj=o)
        return EMPTY

    def in_bounds(self, pos: Pos) -> bool:
        return 0 <= pos[0] < self.width and 0 <= pos[1] < self.height

    @property
    def front_pos(self) -> Pos:
        dx, dy = DIR_VECTORS[self.agent_dir]
        return (self.agent_pos[0] + dx, self.agent_pos[1] + dy)

    @property
    def facing(self) -> str:
        return DIRECTIONS[self.agent_dir]

    def all_objects(self) -> list:
        """Objects on the grid followed by the inventory."""
        return [o for _, o in self.objects] + list(self.inventory)


def check_state(state: GridState) -> GridState:
    """Validate structural invariants, raising :class:`InvalidStateError`."""
    w, h = state.width, state.height
    if w < 3 or h < 3:
        raise InvalidStateError("grid must be at least 3x3")
    for p in state.walls:
        if not state.in_bounds(p):
            raise InvalidStateError(f"wall {p} out of bounds")
    for c in range(w):
        for r in (0, h - 1):
            if (c, r) not in state.walls:
                raise InvalidStateError(f"perimeter tile {(c, r)} is not a wall")
    for r in range(h):
        for c in (0, w - 1):
            if (c, r) not in state.walls:
                raise InvalidStateError(f"perimeter tile {(c, r)} is not a wall")
    occupied = set()
    for p, d in state.doors:
        if not isinstance(d, Door):
            raise InvalidStateError(f"door entry at {p} is not a Door")
        if p in state.walls or p in occupied:
            raise InvalidStateError(f"door at {p} overlaps another cell")
        c, r = p
        horiz = (c - 1, r) in state.walls and (c + 1, r) in state.walls
        vert = (c, r - 1) in state.walls and (c, r + 1) in state.walls
        if not (horiz or vert):
            raise InvalidStateError(f"door at {p} is not on a wall line")
        occupied.add(p)
    for p, o in state.objects:
        if not isinstance(o, Object):
            raise InvalidStateError(f"object entry at {p} is not an Object")
        if not state.in_bounds(p) or p in state.walls or p in occupied:
            raise InvalidStateError(f"object at {p} overlaps another cell")
        occupied.add(p)
    if len(state.inventory) > 1:
        raise InvalidStateError("inventory holds at most one object")
    if not state.in_bounds(state.agent_pos):
        raise InvalidStateError("agent out of bounds")
    if state.agent_pos in state.walls or state.agent_pos in state.object_map:
        raise InvalidStateError("agent stands on a wall or object")
    door = state.door_map.get(state.agent_pos)
    if door is not None and not door.is_open:
        raise InvalidStateError("agent stands on a closed door")
    if state.agent_dir not in range(4):
        raise InvalidStateError(f"bad direction {state.agent_dir}")
    return state


def step(state: GridState, action: int) -> tuple[GridState, bool]:
    """Apply ``action``; returns ``(next_state, valid)``.

    Invalid actions return the input state unchanged.
    """
    if action == TURN_LEFT:
        return replace(state, agent_dir=(state.agent_dir - 1) % 4), True
    if action == TURN_RIGHT:
        return replace(state, agent_dir=(state.agent_dir + 1) % 4), True
    if action == DONE:
        return state, True
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")

    front = state.front_pos
    if not state.in_bounds(front) or front in state.walls:
        return state, False
    door = state.door_map.get(front)
    obj = state.object_map.get(front)

    if action == FORWARD:
        if obj is not None or (door is not None and not door.is_open):
            return state, False
        return replace(state, agent_pos=front), True

    if action == PICKUP:
        if obj is None or state.inventory:
            return state, False
        objects = tuple(item for item in state.objects if item[0] != front)
        return replace(state, objects=objects, inventory=(obj,)), True

    if action == DROP:
        if not state.inventory or obj is not None or door is not None:
            return state, False
        return replace(state, objects=state.objects + ((front, state.inventory[0]),),
                       inventory=()), True

    # TOGGLE
    if door is None:
        return state, False
    if door.state == "locked":
        held = state.inventory[0] if state.inventory else None
        if held is None or held.shape != "key" or held.color != door.color:
            return state, False
        new = Door(door.color, "open")
    elif door.state == "closed":
        new = Door(door.color, "open")
    else:
        new = Door(door.color, "closed")
    doors = tuple((p, new if p == front else d) for p, d in state.doors)
    return replace(state, doors=doors), True


# -- text format -------------------------------------------------------------

def _tile(p: Pos) -> str:
    return f"({p[0]},{p[1]})"


def textualize(state: GridState) -> str:
    """Numbered feature listing of ``state``; inverted by :func:`parse_state`."""
    lines = ["The following tiles are wall: " + " ".join(_tile(p) for p in sorted(state.walls))]
    objs = state.object_map
    for p in sorted(objs):
        if objs[p].shape == "box":
            lines.append(f"A open {objs[p].color} box is on tile {_tile(p)}")
    for p, d in state.doors:
        lines.append(f"A {d.state} {d.color} door is on tile {_tile(p)}")
    for shape in ("key", "ball"):
        for p in sorted(objs):
            if objs[p].shape == shape:
                lines.append(f"A {objs[p].color} {shape} is on tile {_tile(p)}")
    inv = ", ".join(o.describe() for o in state.inventory)
    lines.append(f"Inventory : [{inv}]")
    lines.append(f"The agent is currently at the following tile: {_tile(state.agent_pos)}")
    lines.append(f"The agent is facing {state.facing}")
    return "\n".join(f"{i}. {line}" for i, line in enumerate(lines))


_TILE_RE = re.compile(r"\((\d+),(\d+)\)")
_LINE_RE = re.compile(r"^(\d+)\. (.*)$")
_BOX_RE = re.compile(r"^A open (\w+) box is on tile \((\d+),(\d+)\)$")
_DOOR_RE = re.compile(r"^A (open|closed|locked) (\w+) door is on tile \((\d+),(\d+)\)$")
_OBJ_RE = re.compile(r"^A (\w+) (key|ball) is on tile \((\d+),(\d+)\)$")


def parse_state(text: str) -> GridState:
    """Inverse of :func:`textualize`."""
    walls, doors, objects, inventory = set(), [], [], []
    agent_pos = agent_dir = None
    for raw in text.strip().splitlines():
        m = _LINE_RE.match(raw.strip())
        if not m:
            raise InvalidStateError(f"cannot parse line {raw!r}")
        body = m.group(2)
        if body.startswith("The following tiles are wall:"):
            walls = {(int(a), int(b)) for a, b in _TILE_RE.findall(body)}
        elif mm := _BOX_RE.match(body):
            objects.append(((int(mm[2]), int(mm[3])), Object("box", mm[1])))
        elif mm := _DOOR_RE.match(body):
            doors.append(((int(mm[3]), int(mm[4])), Door(mm[2], mm[1])))
        elif mm := _OBJ_RE.match(body):
            objects.append(((int(mm[3]), int(mm[4])), Object(mm[2], mm[1])))
        elif body.startswith("Inventory : ["):
            inner = body[len("Inventory : ["):].rstrip("]").strip()
            for item in filter(None, (s.strip() for s in inner.split(","))):
                color, shape = item.split()
                inventory.append(Object(shape, color))
        elif body.startswith("The agent is currently at the following tile:"):
            (a, b), = _TILE_RE.findall(body)
            agent_pos = (int(a), int(b))
        elif body.startswith("The agent is facing "):
            agent_dir = DIRECTIONS.index(body[len("The agent is facing "):].strip())
        else:
            raise InvalidStateError(f"unrecognised feature {body!r}")
    if agent_pos is None or agent_dir is None or not walls:
        raise InvalidStateError("state text lacks walls or agent pose")
    width = max(p[0] for p in walls) + 1
    height = max(p[1] for p in walls) + 1
    return check_state(GridState(width, height, frozenset(walls), tuple(doors),
                                 tuple(objects), agent_pos, agent_dir, tuple(inventory)))


# -- layout generation --------------------------------------------------------

@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str | None = None
    count: int = 1
    room: tuple | None = None


@dataclass(frozen=True)
class EnvSpec:
    """Room-grid layout description.

    Grid size is ``rooms * (room_size + 1) + 1`` along each axis.  When
    ``layout_seed`` is set it fixes walls, doors and objects, and the seed
    passed to :func:`generate_env` only places the agent.
    """

    rooms_x: int = 3
    rooms_y: int = 3
    room_size: int = 6
    objects: tuple = (ObjectSpec("box", count=3), ObjectSpec("key", count=3),
                      ObjectSpec("ball", count=3))
    extra_door_prob: float = 0.25
    locked_prob: float = 0.0
    agent_room: tuple | None = None
    layout_seed: int | None = None

    def __post_init__(self):
        if self.rooms_x < 1 or self.rooms_y < 1 or self.room_size < 1:
            raise ValueError("rooms and room_size must be positive")
        object.__setattr__(self, "objects", tuple(
            o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects))

    @property
    def width(self) -> int:
        return self.rooms_x * (self.room_size + 1) + 1

    @property
    def height(self) -> int:
        return self.rooms_y * (self.room_size + 1) + 1

    @classmethod
    def from_room_count(cls, n_rooms: int, **kwargs) -> EnvSpec:
        shapes = {1: (1, 1), 4: (2, 2), 6: (3, 2), 9: (3, 3), 16: (4, 4),
                  25: (5, 5), 49: (7, 7)}
        if n_rooms not in shapes:
            raise ValueError(f"unsupported room count {n_rooms}; choose from {sorted(shapes)}")
        rx, ry = shapes[n_rooms]
        return cls(rooms_x=rx, rooms_y=ry, **kwargs)

    @classmethod
    def preset(cls, kind: str, room_size: int = 3, **kwargs) -> EnvSpec:
        """Simple skill-transfer layouts: ``A`` box only, ``B`` door only,
        ``C`` door leading to a second room holding a box."""
        kind = kind.upper()
        if kind == "A":
            return cls(1, 1, room_size, (ObjectSpec("box"),), **kwargs)
        if kind == "B":
            return cls(2, 1, room_size, (), agent_room=(0, 0), **kwargs)
        if kind == "C":
            return cls(2, 1, room_size, (ObjectSpec("box", room=(1, 0)),),
                       agent_room=(0, 0), **kwargs)
        raise ValueError(f"unknown preset {kind!r}")

    def to_dict(self) -> dict:
        return {
            "rooms_x": self.rooms_x, "rooms_y": self.rooms_y, "room_size": self.room_size,
            "objects": [{"shape": o.shape, "color": o.color, "count": o.count,
                         "room": list(o.room) if o.room else None} for o in self.objects],
            "extra_door_prob": self.extra_door_prob, "locked_prob": self.locked_prob,
            "agent_room": list(self.agent_room) if self.agent_room else None,
            "layout_seed": self.layout_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> EnvSpec:
        d = dict(d)
        if "objects" in d:
            d["objects"] = tuple(ObjectSpec(o["shape"], o.get("color"), o.get("count", 1),
                                            tuple(o["room"]) if o.get("room") else None)
                                 for o in d["objects"])
        if d.get("agent_room") is not None:
            d["agent_room"] = tuple(d["agent_room"])
        return cls(**d)


def _room_tiles(spec: EnvSpec, rx: int, ry: int) -> list:
    s = spec.room_size + 1
    return [(rx * s + 1 + i, ry * s + 1 + j)
            for j in range(spec.room_size) for i in range(spec.room_size)]


def _spanning_doors(spec: EnvSpec, rng: np.random.Generator) -> list:
    """Room adjacencies that receive a door: a random spanning tree plus extras."""
    edges = []
    for ry in range(spec.rooms_y):
        for rx in range(spec.rooms_x):
            if rx + 1 < spec.rooms_x:
                edges.append(((rx, ry), (rx + 1, ry)))
            if ry + 1 < spec.rooms_y:
                edges.append(((rx, ry), (rx, ry + 1)))
    order = rng.permutation(len(edges))
    parent = {}

    def find(a):
        while parent.get(a, a) != a:
            a = parent.get(a, a)
        return a

    chosen = []
    for i in order:
        a, b = edges[i]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            chosen.append(edges[i])
        elif rng.random() < spec.extra_door_prob:
            chosen.append(edges[i])
    return sorted(chosen)


def generate_layout(spec: EnvSpec, seed: int) -> GridState:
    """Walls, doors and objects for ``spec``; agent left at a placeholder pose."""
    rng = np.random.default_rng(seed)
    W, H, s = spec.width, spec.height, spec.room_size + 1
    walls = frozenset((c, r) for c in range(W) for r in range(H) if c % s == 0 or r % s == 0)
    doors, reserved = [], set()
    for (ax, ay), (bx, by) in _spanning_doors(spec, rng):
        off = int(rng.integers(1, spec.room_size + 1))
        if bx != ax:
            pos = ((ax + 1) * s, ay * s + off)
            reserved |= {(pos[0] - 1, pos[1]), (pos[0] + 1, pos[1])}
        else:
            pos = (ax * s + off, (ay + 1) * s)
            reserved |= {(pos[0], pos[1] - 1), (pos[0], pos[1] + 1)}
        color = COLORS[int(rng.integers(len(COLORS)))]
        state = "locked" if rng.random() < spec.locked_prob else "closed"
        doors.append((pos, Door(color, state)))
    walls = walls - {p for p, _ in doors}

    objects, taken = [], set(reserved)
    for ospec in spec.objects:
        for _ in range(ospec.count):
            if ospec.room is not None:
                pool = _room_tiles(spec, *ospec.room)
            else:
                pool = [t for ry in range(spec.rooms_y) for rx in range(spec.rooms_x)
                        for t in _room_tiles(spec, rx, ry)]
            free = [t for t in pool if t not in taken]
            if not free:
                raise CapacityError(f"no free cell left for {ospec.shape}")
            pos = free[int(rng.integers(len(free)))]
            color = ospec.color or COLORS[int(rng.integers(len(COLORS)))]
            objects.append((pos, Object(ospec.shape, color)))
            taken.add(pos)
    for p, d in doors:
        if d.state == "locked" and not any(o.shape == "key" and o.color == d.color
                                           for _, o in objects):
            free = [t for ry in range(spec.rooms_y) for rx in range(spec.rooms_x)
                    for t in _room_tiles(spec, rx, ry) if t not in taken]
            if not free:
                raise CapacityError("no free cell left for a door key")
            pos = free[int(rng.integers(len(free)))]
            objects.append((pos, Object("key", d.color)))
            taken.add(pos)
    anchor = next(t for t in _room_tiles(spec, 0, 0) if t not in taken) \
        if any(t not in taken for t in _room_tiles(spec, 0, 0)) else None
    if anchor is None:
        raise CapacityError("no free cell for the agent")
    return GridState(W, H, walls, tuple(doors), tuple(objects), anchor, 0, ())


def place_agent(layout: GridState, spec: EnvSpec, rng: np.random.Generator) -> GridState:
    if spec.agent_room is not None:
        pool = _room_tiles(spec, *spec.agent_room)
    else:
        pool = [t for ry in range(spec.rooms_y) for rx in range(spec.rooms_x)
                for t in _room_tiles(spec, rx, ry)]
    occupied = layout.object_map
    free = [t for t in pool if t not in occupied]
    if not free:
        raise CapacityError("no free cell for the agent")
    pos = free[int(rng.integers(len(free)))]
    return replace(layout, agent_pos=pos, agent_dir=int(rng.integers(4)))


def generate_env(spec: EnvSpec, seed: int) -> GridState:
    """Reproducible initial state for ``(spec, seed)``."""
    layout_seed = spec.layout_seed if spec.layout_seed is not None else seed
    layout = generate_layout(spec, layout_seed)
    return check_state(place_agent(layout, spec, np.random.default_rng([seed, 1])))


def enumerate_poses(layout: GridState) -> list:
    """Every valid agent pose on ``layout`` (objects and doors left as is)."""
    out = []
    for c in range(layout.width):
        for r in range(layout.height):
            p = (c, r)
            cell = layout.cell(p)
            if cell.kind == "empty" or (cell.kind == "door" and cell.door.is_open):
                out.extend(replace(layout, agent_pos=p, agent_dir=d) for d in range(4))
    return out


def empty_room(width: int, height: int, agent_pos: Pos = (1, 1), agent_dir: int = 0,
               objects: Iterable = (), doors: Iterable = (),
               inner_walls: Iterable = ()) -> GridState:
    """Walled rectangle, handy for fixtures."""
    walls = {(c, r) for c in range(width) for r in range(height)
             if c in (0, width - 1) or r in (0, height - 1)}
    walls |= set(inner_walls)
    doors = tuple(doors)
    walls -= {p for p, _ in doors}
    return check_state(GridState(width, height, frozenset(walls), doors, tuple(objects),
                                 agent_pos, agent_dir, ()))


def replay(x0: GridState, actions: Sequence[int]) -> list:
    """States visited by applying ``actions`` from ``x0`` (including ``x0``)."""
    states = [x0]
    for a in actions:
        states.append(step(states[-1], a)[0])
    return states
