"""Offline solvers for labeled abstract datasets.

Tabular Q-learning over the logged transitions, plus the empirical transition
model used to roll policies forward and two behavioral-cloning baselines.
States are handled by their integer id in the :class:`AbstractDataset`.
"""
from __future__ import annotations

import hashlib
import logging
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass

import numba
import numpy as np
from sklearn.base import BaseEstimator

from . import _blob
from .abstraction import AbstractDataset
from .gridworld import N_ACTIONS

logger = logging.getLogger(__name__)


class NotInCoverageError(KeyError):
    """The policy has no action for this state."""


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 0.1
    gamma: float = 0.7
    epsilon: float = 1e-6
    max_sweeps: int = 10_000

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "gamma": self.gamma, "epsilon": self.epsilon,
                "max_sweeps": self.max_sweeps}


def canonical_ranks(states) -> np.ndarray:
    """Rank of each state under the canonical encoding order."""
    order = sorted(range(len(states)), key=lambda i: states[i].encoding)
    ranks = np.empty(len(states), dtype=np.int64)
    ranks[order] = np.arange(len(states))
    return ranks


# -- empirical transitions ----------------------------------------------------

class EmpiricalTransitions:
    """Successor counts per ``(state, action)`` and their deterministic mode."""

    def __init__(self, dg: AbstractDataset):
        self.dataset = dg
        counts: dict = defaultdict(Counter)
        for s, a, s2 in zip(dg.src.tolist(), dg.act.tolist(), dg.dst.tolist()):
            counts[(s, a)][s2] += 1
        self.counts = dict(counts)
        self._ranks = None
        self._mode: dict = {}

    def __contains__(self, key) -> bool:
        return key in self.counts

    def mode_id(self, s: int, a: int) -> int:
        """Most frequent successor id; ties go to the smallest canonical encoding."""
        key = (s, a)
        if key in self._mode:
            return self._mode[key]
        succ = self.counts.get(key)
        if succ is None:
            raise NotInCoverageError(key)
        top = max(succ.values())
        tied = [x for x, c in succ.items() if c == top]
        if len(tied) > 1:
            if self._ranks is None:
                self._ranks = canonical_ranks(self.dataset.states)
            tied.sort(key=lambda x: self._ranks[x])
        self._mode[key] = tied[0]
        return tied[0]

    def mode(self, s, a: int):
        """State-level view of :meth:`mode_id`."""
        idx = self.dataset.index.get(s)
        if idx is None:
            raise NotInCoverageError(s)
        return self.dataset.states[self.mode_id(idx, a)]


def fit_empirical_transitions(dg: AbstractDataset) -> EmpiricalTransitions:
    return EmpiricalTransitions(dg)


# -- Q-learning ---------------------------------------------------------------

@numba.njit(cache=True)
def _sweeps(q, stored, src, act, dst, rew, alpha, gamma, eps, max_sweeps):
    n_actions = q.shape[1]
    delta = 0.0
    for sweep in range(1, max_sweeps + 1):
        before = q.copy()
        for t in range(src.shape[0]):
            s2 = dst[t]
            best = 0.0
            seen = False
            for b in range(n_actions):
                if stored[s2, b]:
                    if not seen or q[s2, b] > best:
                        best = q[s2, b]
                        seen = True
            s, a = src[t], act[t]
            q[s, a] = (1.0 - alpha) * q[s, a] + alpha * (rew[t] + gamma * best)
        delta = np.max(np.abs(q - before)) if q.size else 0.0
        if delta < eps:
            return sweep, True, delta
    return max_sweeps, False, delta


@dataclass
class QTable:
    """Dense ``(n_states, 7)`` value table with a mask of stored pairs."""

    values: np.ndarray
    stored: np.ndarray
    config: SolverConfig
    converged: bool
    sweeps: int
    last_delta: float
    goal_id: str = ""

    def __getitem__(self, key):
        s, a = key
        return float(self.values[s, a])

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    def coverage(self) -> np.ndarray:
        """Ids of states with at least one stored action."""
        return np.flatnonzero(self.stored.any(axis=1))

    def bellman_residual(self, dg: AbstractDataset) -> float:
        """Largest change one further sweep would make (run on a copy)."""
        src, act, dst, rew = _ordered(dg)
        q = self.values.copy()
        _, _, delta = _sweeps(q, self.stored, src, act, dst, rew, self.config.alpha,
                              self.config.gamma, 0.0, 1)
        return float(delta)

    def to_bytes(self) -> bytes:
        return _blob.dumps({"values": self.values, "stored": self.stored.astype(np.uint8)},
                           self.sidecar())

    def sidecar(self) -> dict:
        return {"format": "qtable", "version": 1, "goal_id": self.goal_id,
                "config": self.config.to_dict(), "converged": self.converged,
                "sweeps": self.sweeps, "last_delta": self.last_delta,
                "n_states": self.n_states, "coverage": int(len(self.coverage()))}

    def save(self, path) -> None:
        _blob.save(path, {"values": self.values, "stored": self.stored.astype(np.uint8)},
                   self.sidecar(), sidecar=self.sidecar())

    @classmethod
    def load(cls, path) -> QTable:
        arrays, meta = _blob.load(path)
        return cls(arrays["values"], arrays["stored"].astype(bool), SolverConfig(**meta["config"]),
                   meta["converged"], meta["sweeps"], meta["last_delta"], meta["goal_id"])

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _ordered(dg: AbstractDataset):
    """Transitions in canonical ``(src, action, dst, reward)`` order."""
    if dg.rewards is None:
        raise ValueError("dataset is unlabeled")
    ranks = canonical_ranks(dg.states)
    order = np.lexsort((dg.rewards, ranks[dg.dst], dg.act, ranks[dg.src]))
    return (dg.src[order].astype(np.int64), dg.act[order].astype(np.int64),
            dg.dst[order].astype(np.int64), dg.rewards[order].astype(np.float64))


def q_learning(dg: AbstractDataset, cfg: SolverConfig | None = None) -> QTable:
    """Sample-sweep Q-learning over the labeled transition multiset.

    One sweep applies the update to every transition once, in canonical
    order.  The bootstrap maximum only ranges over actions stored for the
    successor (0 when the successor never appears as a source).

    Every update shrinks the sup-norm distance to the fixed point by at
    least ``L = 1 - alpha * (1 - gamma)``, so stopping once a sweep moves
    the table by less than ``epsilon * (1 - L) / L`` leaves every value
    within ``epsilon`` of the fixed point.
    """
    cfg = cfg or SolverConfig()
    n = len(dg.states)
    values = np.zeros((n, N_ACTIONS), dtype=np.float64)
    stored = np.zeros((n, N_ACTIONS), dtype=np.bool_)
    gid = dg.goal.id if dg.goal is not None else ""
    if len(dg) == 0:
        warnings.warn("empty dataset: Q-table is empty", stacklevel=2)
        return QTable(values, stored, cfg, True, 0, 0.0, gid)
    src, act, dst, rew = _ordered(dg)
    stored[src, act] = True
    rate = 1.0 - cfg.alpha * (1.0 - cfg.gamma)
    tol = cfg.epsilon * (1.0 - rate) / rate if rate > 0 else cfg.epsilon
    sweeps, converged, delta = _sweeps(values, stored, src, act, dst, rew, cfg.alpha, cfg.gamma,
                                       tol, cfg.max_sweeps)
    if not converged:
        logger.warning("Q-learning for %s stopped after %d sweeps (delta %.3g)", gid, sweeps, delta)
    return QTable(values, stored, cfg, bool(converged), int(sweeps), float(delta), gid)


# -- policies -----------------------------------------------------------------

class TabularPolicy:
    """Action lookup keyed by abstract state.

    ``table`` maps state id to action; ``index`` maps states to ids.
    """

    kind = "tabular"

    def __init__(self, table: dict, index: dict, kind: str | None = None):
        self.table = table
        self.index = index
        if kind:
            self.kind = kind

    @property
    def coverage(self) -> set:
        return set(self.table)

    def __len__(self):
        return len(self.table)

    def action_id(self, s: int) -> int:
        a = self.table.get(s)
        if a is None:
            raise NotInCoverageError(s)
        return a

    def action(self, state) -> int:
        idx = self.index.get(state)
        if idx is None or idx not in self.table:
            raise NotInCoverageError(state)
        return self.table[idx]

    def predict(self, states) -> np.ndarray:
        """Actions for ``states``; -1 outside coverage."""
        out = []
        for s in states:
            idx = self.index.get(s)
            out.append(self.table.get(idx, -1) if idx is not None else -1)
        return np.asarray(out, dtype=np.int64)


def greedy_policy(q: QTable, index: dict | None = None) -> TabularPolicy:
    """Argmax over stored actions; ties go to the lowest action code."""
    masked = np.where(q.stored, q.values, -np.inf)
    best = masked.argmax(axis=1)
    table = {int(s): int(best[s]) for s in q.coverage()}
    return TabularPolicy(table, index or {}, "greedy_q")


def _majority(actions) -> int:
    counts = Counter(actions)
    top = max(counts.values())
    return min(a for a, c in counts.items() if c == top)


def gcbc(dg: AbstractDataset) -> TabularPolicy:
    """Most frequent logged action per state, ties to the lowest code."""
    per_state = defaultdict(list)
    for s, a in zip(dg.src.tolist(), dg.act.tolist()):
        per_state[s].append(a)
    return TabularPolicy({s: _majority(acts) for s, acts in per_state.items()}, dg.index, "gcbc")


def remove_loops(states: list, actions: list) -> tuple[list, list]:
    """Cut the segment between repeated visits of a state."""
    path, acts, pos = [states[0]], [], {states[0]: 0}
    for a, s in zip(actions, states[1:]):
        if s in pos:
            k = pos[s]
            for dropped in path[k + 1:]:
                del pos[dropped]
            path, acts = path[:k + 1], acts[:k]
        else:
            acts.append(a)
            pos[s] = len(path)
            path.append(s)
    return path, acts


@dataclass
class FilteredBCResult:
    states: list
    actions: list
    score: float
    trajectory: int


def filtered_bc(trajectories: list, scores, threshold: float = 0.6,
                index: dict | None = None) -> tuple[TabularPolicy, FilteredBCResult | None]:
    """Clone the single best-scoring trajectory after loop removal.

    ``trajectories`` holds ``(states, actions)`` pairs and ``scores`` one
    scalar per trajectory.  Returns an empty policy (and ``None``) when the
    best score is below ``threshold``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(trajectories) != len(scores):
        raise ValueError("one score per trajectory required")
    index = index if index is not None else {}
    if not len(scores):
        return TabularPolicy({}, index, "filtered_bc"), None
    best = int(np.argmax(scores))
    if scores[best] < threshold:
        logger.info("filtered BC: best score %.3f below threshold %.2f", scores[best], threshold)
        return TabularPolicy({}, index, "filtered_bc"), None
    states, actions = trajectories[best]
    path, acts = remove_loops(list(states), list(actions))
    if not index:
        index = {s: i for i, s in enumerate(path)}
    table = {index[s]: a for s, a in zip(path, acts)}
    return (TabularPolicy(table, index, "filtered_bc"),
            FilteredBCResult(path, acts, float(scores[best]), best))


def trajectory_segments(dg: AbstractDataset) -> tuple[list, np.ndarray]:
    """Per-trajectory ``(states, actions)`` cut at the first highest reward.

    The score of each segment is that reward, so a trajectory is judged by
    its best terminal state.
    """
    if dg.rewards is None:
        raise ValueError("dataset is unlabeled")
    out, scores = [], []
    bounds = np.flatnonzero(np.diff(dg.traj)) + 1
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(dg)]):
        if hi <= lo:
            continue
        r = dg.rewards[lo:hi]
        k = int(np.argmax(r))
        ids = [int(dg.src[lo])] + [int(x) for x in dg.dst[lo:lo + k + 1]]
        out.append((ids, [int(a) for a in dg.act[lo:lo + k + 1]]))
        scores.append(float(r[k]))
    return out, np.asarray(scores)


# -- estimators ---------------------------------------------------------------

class QLearner(BaseEstimator):
    """Estimator wrapper: ``fit`` solves the labeled dataset, ``predict``
    returns greedy actions (-1 outside coverage)."""

    def __init__(self, alpha=0.1, gamma=0.7, epsilon=1e-6, max_sweeps=10_000):
        self.alpha = alpha
        self.gamma = gamma
        self.epsilon = epsilon
        self.max_sweeps = max_sweeps

    def fit(self, dg: AbstractDataset, y=None):
        cfg = SolverConfig(self.alpha, self.gamma, self.epsilon, self.max_sweeps)
        self.q_table_ = q_learning(dg, cfg)
        self.policy_ = greedy_policy(self.q_table_, dg.index)
        return self

    def predict(self, states) -> np.ndarray:
        return self.policy_.predict(states)


class GCBC(BaseEstimator):
    """Goal-conditioned behavioral cloning (per-state majority action)."""

    def fit(self, dg: AbstractDataset, y=None):
        self.policy_ = gcbc(dg)
        return self

    def predict(self, states) -> np.ndarray:
        return self.policy_.predict(states)


class FilteredBC(BaseEstimator):
    """Filtered behavioral cloning on a labeled abstract dataset."""

    def __init__(self, threshold=0.6):
        self.threshold = threshold

    def fit(self, dg: AbstractDataset, y=None):
        segs, scores = trajectory_segments(dg)
        # segments hold state ids, so the clone is keyed by id and exposed
        # through the dataset's state index
        ids = {i: i for i in range(len(dg.states))}
        cloned, self.result_ = filtered_bc(segs, scores, self.threshold, index=ids)
        self.policy_ = TabularPolicy(cloned.table, dg.index, "filtered_bc")
        self.empty_ = self.result_ is None
        return self

    def predict(self, states) -> np.ndarray:
        return self.policy_.predict(states)
