"""Online evaluation harness.

Any object with ``act(state, step) -> int`` is a policy here; an optional
``reset()`` is called at the start of each episode.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gridworld as gw
from .collect import UnreachableGoalError, plan
from .goals import Goal, is_goal_state
from .llm import TransportError
from .offline_rl import NotInCoverageError

logger = logging.getLogger(__name__)

NO_ACTION = -1


class EpisodeAborted(RuntimeError):
    """The policy's transport failed; the episode is excluded."""


class StateSpaceTooLarge(RuntimeError):
    def __init__(self, size: int, limit: int):
        super().__init__(f"{size} candidate start states exceed the limit of {limit}")
        self.size = size
        self.limit = limit


# -- policies -----------------------------------------------------------------

class AbstractAgent:
    """Tabular policy acting on abstract states from its own abstraction."""

    stationary = True

    def __init__(self, abstraction, policy):
        self.abstraction = abstraction
        self.policy = policy

    def act(self, state, step: int) -> int:
        return self.policy.action(self.abstraction.transform_one(state))


class BotAgent:
    """Planner with access to the true goal."""

    stationary = True

    def __init__(self, goal: Goal):
        self.goal = goal

    def act(self, state, step: int) -> int:
        try:
            return plan(state, self.goal)[0]
        except UnreachableGoalError as exc:
            raise NotInCoverageError(self.goal.id) from exc


class ConstantAgent:
    stationary = True

    def __init__(self, action: int):
        self.action = action

    def act(self, state, step: int) -> int:
        return self.action


class NullAgent:
    """Defined nowhere; every query is a coverage miss."""

    stationary = True

    def act(self, state, step: int) -> int:
        raise NotInCoverageError(state)


# -- episodes -----------------------------------------------------------------

def start_digest(state: gw.GridState) -> str:
    return hashlib.sha256(gw.textualize(state).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class EpisodeOutcome:
    success: bool
    steps: int
    invalid_count: int
    total_actions: int
    goal_id: str
    start_digest: str
    actions: tuple = ()
    start_text: str = ""


def rollout(x0: gw.GridState, policy, goal: Goal, cap: int = 500) -> EpisodeOutcome:
    """Run one episode; success is judged by the true goal predicate.

    A coverage miss is recorded as action ``-1``: an invalid no-op.  For
    policies marked ``stationary`` (action a function of the state alone) a
    revisited state means the episode cycles until the cap, so the cycle is
    replayed arithmetically instead of simulated.
    """
    if cap < 1:
        raise ValueError("cap must be at least 1")
    if hasattr(policy, "reset"):
        policy.reset()
    digest, text = start_digest(x0), gw.textualize(x0)
    if is_goal_state(x0, goal):
        return EpisodeOutcome(True, 0, 0, 0, goal.id, digest, (), text)
    seen = {} if getattr(policy, "stationary", False) else None
    x, actions, bad = x0, [], []
    for t in range(cap):
        if seen is not None:
            t0 = seen.get(x)
            if t0 is not None:
                reps, rem = divmod(cap - t, t - t0)
                actions += actions[t0:t] * reps + actions[t0:t0 + rem]
                bad += bad[t0:t] * reps + bad[t0:t0 + rem]
                break
            seen[x] = t
        try:
            a = int(policy.act(x, t))
        except NotInCoverageError:
            a = NO_ACTION
        except TransportError as exc:
            raise EpisodeAborted(str(exc)) from exc
        actions.append(a)
        if a == NO_ACTION:
            bad.append(True)
            continue
        x, valid = gw.step(x, a)
        bad.append(not valid)
        if is_goal_state(x, goal):
            return EpisodeOutcome(True, t + 1, sum(bad), len(actions), goal.id, digest,
                                  tuple(actions), text)
    return EpisodeOutcome(False, cap, sum(bad), len(actions), goal.id, digest, tuple(actions),
                          text)


def recount(outcome: EpisodeOutcome, goal: Goal, cap: int) -> EpisodeOutcome:
    """Recompute an outcome from its stored start and actions alone."""
    x = gw.parse_state(outcome.start_text)
    if is_goal_state(x, goal):
        return EpisodeOutcome(True, 0, 0, 0, goal.id, outcome.start_digest, (), outcome.start_text)
    invalid = 0
    for t, a in enumerate(outcome.actions):
        if a == NO_ACTION:
            invalid += 1
            continue
        x, valid = gw.step(x, a)
        invalid += not valid
        if is_goal_state(x, goal):
            return EpisodeOutcome(True, t + 1, invalid, t + 1, goal.id, outcome.start_digest,
                                  outcome.actions, outcome.start_text)
    return EpisodeOutcome(False, cap, invalid, len(outcome.actions), goal.id,
                          outcome.start_digest, outcome.actions, outcome.start_text)


# -- aggregation --------------------------------------------------------------

@dataclass
class MetricsReport:
    n: int
    success_rate: float
    success_se: float
    mean_episode_length: float
    length_se: float
    invalid_ratio: float
    invalid_se: float
    cap: int
    aborted: int = 0
    outcomes: list = field(default_factory=list, repr=False)

    @classmethod
    def from_outcomes(cls, outcomes, cap: int, aborted: int = 0) -> MetricsReport:
        outcomes = list(outcomes)
        n = len(outcomes)
        if n == 0:
            return cls(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, cap, aborted, [])
        succ = sum(o.success for o in outcomes)
        p = succ / n
        lengths = np.array([o.steps for o in outcomes], dtype=np.float64)
        inv = sum(o.invalid_count for o in outcomes)
        tot = sum(o.total_actions for o in outcomes)
        r = inv / tot if tot else 0.0
        return cls(n, p, math.sqrt(p * (1 - p) / n), float(lengths.mean()),
                   float(lengths.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
                   r, math.sqrt(r * (1 - r) / tot) if tot else 0.0, cap, aborted, outcomes)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("outcomes")
        return d

    def to_json(self, with_outcomes: bool = True) -> str:
        d = self.summary()
        if with_outcomes:
            d["outcomes"] = [asdict(o) | {"actions": list(o.actions)} for o in self.outcomes]
        return json.dumps(d, sort_keys=True)

    def table_row(self, name: str) -> str:
        return (f"{name:<28} {100 * self.success_rate:6.1f} (±{100 * self.success_se:.1f})  "
                f"{self.mean_episode_length:7.1f} (±{self.length_se:.1f})  "
                f"{100 * self.invalid_ratio:6.1f} (±{100 * self.invalid_se:.1f})")


TABLE_HEADER = (f"{'Method':<28} {'Success rate (%)':>16}  {'Episode length':>16}  "
                f"{'Invalid actions (%)':>20}")


def format_table(rows: dict) -> str:
    return "\n".join([TABLE_HEADER] + [r.table_row(k) for k, r in rows.items()]) + "\n"


def to_csv(rows: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "n", "success_rate", "success_se", "mean_episode_length", "length_se",
                "invalid_ratio", "invalid_se"])
    for k, r in rows.items():
        w.writerow([k, r.n, r.success_rate, r.success_se, r.mean_episode_length, r.length_se,
                    r.invalid_ratio, r.invalid_se])
    return buf.getvalue()


def evaluate(suite, policy_for, cap: int = 500) -> MetricsReport:
    """Roll out every ``(goal, start)`` pair.

    ``policy_for(goal)`` returns the policy to use for that goal; episodes
    whose transport fails are dropped and counted in ``aborted``.
    """
    suite = list(suite)
    if not suite:
        raise ValueError("empty evaluation suite")
    outcomes, aborted, cache = [], 0, {}
    for goal, x0 in suite:
        pol = cache.get(goal)
        if pol is None:
            pol = cache[goal] = policy_for(goal)
        try:
            outcomes.append(rollout(x0, pol, goal, cap))
        except EpisodeAborted as exc:
            logger.warning("episode for %s aborted: %s", goal.id, exc)
            aborted += 1
    return MetricsReport.from_outcomes(outcomes, cap, aborted)


def build_suite(goals, specs, n_starts: int, seed: int, require_solvable: bool = True) -> list:
    """``n_starts`` seeded start states per goal drawn from ``specs``.

    Starts where the planner cannot reach the goal are skipped when
    ``require_solvable``; at most ``20 * n_starts`` draws are tried per goal.
    """
    rng = np.random.default_rng(seed)
    suite = []
    for goal in goals:
        found, tries = 0, 0
        while found < n_starts and tries < 20 * n_starts:
            tries += 1
            spec = specs[int(rng.integers(len(specs)))]
            x0 = gw.generate_env(spec, int(rng.integers(2**31)))
            if require_solvable and not is_goal_state(x0, goal):
                try:
                    _solve_check(x0, goal)
                except UnreachableGoalError:
                    continue
            suite.append((goal, x0))
            found += 1
    return suite


def _solve_check(x0, goal, limit: int = 200):
    x = x0
    for _ in range(limit):
        if is_goal_state(x, goal):
            return
        x = gw.step(x, plan(x, goal)[0])[0]
    raise UnreachableGoalError(goal.id)


def suite_cells(train_goals, test_goals, train_specs, test_specs, n_starts: int,
                seed: int) -> dict:
    """The four train/test environment x goal evaluation suites."""
    cells = {}
    for i, (gname, goals) in enumerate((("train_goals", train_goals), ("test_goals", test_goals))):
        for j, (ename, specs) in enumerate((("train_env", train_specs), ("test_env", test_specs))):
            cells[f"{ename}/{gname}"] = build_suite(goals, specs, n_starts, seed + 2 * i + j)
    return cells


# -- reachability -------------------------------------------------------------

def reachable_initial_states(policy, goal: Goal, layout: gw.GridState, abstraction=None,
                             cap: int = 500, limit: int = 20_000) -> int:
    """Distinct non-goal start states from which the policy reaches ``goal``.

    Candidates are every agent pose on ``layout``; with an ``abstraction``
    they are deduplicated by abstract state (first pose in scan order stands
    for its class).
    """
    poses = gw.enumerate_poses(layout)
    if len(poses) > limit:
        raise StateSpaceTooLarge(len(poses), limit)
    seen, count = set(), 0
    for x in poses:
        if is_goal_state(x, goal):
            continue
        key = abstraction.transform_one(x) if abstraction is not None else x
        if key in seen:
            continue
        seen.add(key)
        if rollout(x, policy, goal, cap).success:
            count += 1
    return count
