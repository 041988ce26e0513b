"""Hindsight reward labeling for one goal's abstract dataset.

A small set of states with distinct goal-identification features is sent to
an oracle; a CNN proxy trained on the answers then labels every transition.
"""
from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import precision_recall_curve
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import _blob
from ._validation import check_fraction, check_labels, check_positive_int
from .abstraction import INV_GOAL_OBJECT, AbstractDataset, AbstractState, abstract_text, phi_goal_achieved
from .goals import Goal, is_goal_state, render
from .gridworld import GridState
from .llm import REWARD_SYSTEM, REWARD_USER, ChatClient, CompletionParseError, parse_verdict

logger = logging.getLogger(__name__)

DEFAULT_CAP = 5000
N_CHANNELS = 5


# -- subset selection ---------------------------------------------------------

def select_labeling_subset(dg: AbstractDataset, cap: int = DEFAULT_CAP, seed: int = 0) -> list:
    """States with pairwise-distinct ``phi``, at most ``cap`` of them."""
    cap = check_positive_int(cap, "cap")
    if not dg.states:
        warnings.warn("empty dataset: nothing to label", stacklevel=2)
        return []
    seen, distinct = set(), []
    for s in dg.states:
        if s.phi not in seen:
            seen.add(s.phi)
            distinct.append(s)
    if len(distinct) <= cap:
        return distinct
    idx = np.sort(np.random.default_rng(seed).choice(len(distinct), size=cap, replace=False))
    return [distinct[i] for i in idx]


# -- oracles ------------------------------------------------------------------

class GroundTruthLabeler:
    """Exact goal predicate; never answers NA."""

    source = "ground_truth_oracle"

    def __init__(self, goal: Goal):
        self.goal = goal

    def __call__(self, s) -> int:
        if isinstance(s, GridState):
            return int(is_goal_state(s, self.goal))
        return int(phi_goal_achieved(s.phi, self.goal))


class LLMLabeler:
    """Verdicts from a chat endpoint; unparseable answers become NA."""

    source = "llm_oracle"

    def __init__(self, client: ChatClient, goal: Goal, width: int, height: int):
        self.client = client
        self.goal = goal
        self.width = width
        self.height = height
        self.failures: list = []

    def prompt(self, s) -> str:
        text = s if isinstance(s, str) else abstract_text(s, self.goal)
        return REWARD_USER.format(width=self.width, height=self.height, state=text,
                                  goal=render(self.goal))

    def __call__(self, s):
        raw = self.client.complete(REWARD_SYSTEM, self.prompt(s))
        try:
            return parse_verdict(raw)
        except CompletionParseError as exc:
            self.failures.append(exc.raw)
            return None


def oracle_label(s, goal: Goal, labeler=None):
    """Label one state: 1, 0, or ``None`` for NA."""
    return (labeler or GroundTruthLabeler(goal))(s)


@dataclass
class LabeledSubset:
    goal: Goal
    states: list
    labels: list
    source: str = "ground_truth_oracle"
    raw_failures: list = field(default_factory=list)

    def usable(self) -> tuple[list, np.ndarray]:
        """Entries with a definite label (NA dropped)."""
        keep = [i for i, y in enumerate(self.labels) if y is not None]
        return [self.states[i] for i in keep], np.array([self.labels[i] for i in keep],
                                                         dtype=np.int64)


def label_subset(states: list, goal: Goal, labeler=None) -> LabeledSubset:
    labeler = labeler or GroundTruthLabeler(goal)
    labels = [labeler(s) for s in states]
    return LabeledSubset(goal, list(states), labels, getattr(labeler, "source", "custom"),
                         list(getattr(labeler, "failures", [])))


# -- proxy --------------------------------------------------------------------

def _phi(s):
    return s.phi if isinstance(s, AbstractState) else s


def phi_extent(items) -> tuple[int, int]:
    """Smallest grid holding every tile mentioned in the given ``phi`` values."""
    w = h = 1
    for s in items:
        objs, locs, _, agent, doors = _phi(s)
        for p in (*objs, *locs, *(d[0] for d in doors), *( [agent] if agent else [])):
            w, h = max(w, p[0] + 1), max(h, p[1] + 1)
    return w, h


def encode_phi(items, shape: tuple[int, int]) -> np.ndarray:
    """Grid tensor ``(n, 5, width, height)``.

    Channels: goal objects, goal locations, agent, inventory holds a goal
    object (broadcast), open goal doors.  Tiles outside ``shape`` are dropped.
    """
    w, h = shape
    out = np.zeros((len(items), N_CHANNELS, w, h), dtype=np.float32)
    for i, s in enumerate(items):
        objs, locs, inv, agent, doors = _phi(s)
        for ch, tiles in ((0, objs), (1, locs), (2, (agent,) if agent else ()),
                          (4, [p for p, st in doors if st == "open"])):
            for c, r in tiles:
                if c < w and r < h:
                    out[i, ch, c, r] = 1.0
        if inv == INV_GOAL_OBJECT:
            out[i, 3] = 1.0
    return out


class _ProxyNet(nn.Module):
    def __init__(self, shape, channels, hidden, kernel, dropout, pooling):
        super().__init__()
        self.conv = nn.Conv2d(N_CHANNELS, channels, kernel_size=kernel, padding=kernel - 1)
        self.pooling = pooling
        if pooling == "max":
            width = channels
        else:
            w, h = shape
            width = channels * (w + kernel - 1) * (h + kernel - 1)
        self.head = nn.Sequential(nn.Dropout(dropout), nn.Linear(width, hidden), nn.ReLU(),
                                  nn.Dropout(dropout), nn.Linear(hidden, 1))

    def forward(self, x):
        z = torch.relu(self.conv(x))
        z = F.adaptive_max_pool2d(z, 1).flatten(1) if self.pooling == "max" else z.flatten(1)
        return self.head(z).squeeze(1)


def calibrate_threshold(scores, labels, target_precision: float = 0.95) -> tuple[float, bool]:
    """Smallest score threshold whose precision on ``(scores, labels)`` reaches the target.

    Candidates are the scores of positive examples: recall only changes
    there, so a threshold between two of them admits extra negatives for no
    gain.  On separable scores this returns the upper edge of the gap.
    Returns ``(threshold, ok)``; when no threshold qualifies ``(1.0, False)``.
    """
    target_precision = check_fraction(target_precision, "target_precision")
    labels = check_labels(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.sum() == 0:
        return 1.0, False
    precision, _, thresholds = precision_recall_curve(labels, scores)
    candidate = np.isin(thresholds, scores[labels == 1])
    for p, t, ok in zip(precision[:-1], thresholds, candidate):
        if ok and p >= target_precision:
            return float(t), True
    return 1.0, False


class RewardProxy(ClassifierMixin, BaseEstimator):
    """Binary classifier over goal-identification features.

    ``fit`` takes abstract states (or their ``phi`` tuples) and 0/1 labels,
    trains on a 90/10 split keeping the weights with the lowest validation
    loss, then calibrates ``threshold_`` for ``target_precision``.

    Attributes
    ----------
    threshold_ : float
    calibrated_ : bool
        False when no threshold reached the target precision.
    degenerate_ : bool
        True when the labels held a single class; the model is then constant.
    """

    def __init__(self, grid_shape=None, channels=32, hidden=32, kernel_size=2, dropout=0.1,
                 lr=1e-5, max_epochs=3000, batch_size=256, val_fraction=0.1, patience=None,
                 pooling="max", target_precision=0.95, random_state=0):
        self.grid_shape = grid_shape
        self.channels = channels
        self.hidden = hidden
        self.kernel_size = kernel_size
        self.dropout = dropout
        self.lr = lr
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.patience = patience
        self.pooling = pooling
        self.target_precision = target_precision
        self.random_state = random_state

    def _check_params(self):
        if self.pooling not in ("max", "flatten"):
            raise ValueError(f"pooling must be 'max' or 'flatten', got {self.pooling!r}")
        check_positive_int(self.max_epochs, "max_epochs")
        check_positive_int(self.batch_size, "batch_size")
        check_fraction(self.val_fraction, "val_fraction", high_open=True)
        check_fraction(self.dropout, "dropout", low_open=False, high_open=True)
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def fit(self, X, y):
        self._check_params()
        X = list(X)
        y = check_labels(y)
        if len(X) != len(y):
            raise ValueError("X and y lengths differ")
        self.classes_ = np.array([0, 1])
        self.shape_ = tuple(self.grid_shape) if self.grid_shape else phi_extent(X)
        self.n_train_ = len(X)
        self.degenerate_ = bool(len(y) == 0 or y.min() == y.max())
        if self.degenerate_:
            self.constant_ = float(y[0]) if len(y) else 0.0
            self.net_ = None
            self.best_val_loss_ = 0.0
            self.epochs_run_ = 0
            self.threshold_ = 1.0
            self.calibrated_ = False
            logger.info("single-class labels: proxy is constant %s", self.constant_)
            return self
        torch.manual_seed(self.random_state)
        rng = np.random.default_rng(self.random_state)
        data = torch.from_numpy(encode_phi(X, self.shape_))
        target = torch.from_numpy(y.astype(np.float32))
        order = rng.permutation(len(X))
        n_val = int(round(self.val_fraction * len(X)))
        val_idx, tr_idx = order[:n_val], order[n_val:]
        if len(val_idx) == 0:
            val_idx = tr_idx
        net = _ProxyNet(self.shape_, self.channels, self.hidden, self.kernel_size,
                        self.dropout, self.pooling)
        opt = torch.optim.Adam(net.parameters(), lr=self.lr)
        loss_fn = nn.BCEWithLogitsLoss()
        xv, yv = data[val_idx], target[val_idx]
        best, best_state, stale, epoch = float("inf"), None, 0, 0
        for epoch in range(1, self.max_epochs + 1):
            net.train()
            perm = rng.permutation(tr_idx)
            for start in range(0, len(perm), self.batch_size):
                b = perm[start:start + self.batch_size]
                opt.zero_grad()
                loss = loss_fn(net(data[b]), target[b])
                loss.backward()
                opt.step()
            net.eval()
            with torch.no_grad():
                vloss = float(loss_fn(net(xv), yv))
            if vloss < best:
                best, best_state, stale = vloss, copy.deepcopy(net.state_dict()), 0
            else:
                stale += 1
                if self.patience is not None and stale >= self.patience:
                    break
        net.load_state_dict(best_state)
        net.eval()
        self.net_ = net
        self.best_val_loss_ = best
        self.epochs_run_ = epoch
        scores = self._scores(X)
        self.threshold_, self.calibrated_ = calibrate_threshold(scores, y, self.target_precision)
        return self

    def _scores(self, X) -> np.ndarray:
        X = list(X)
        if self.net_ is None:
            return np.full(len(X), self.constant_)
        out = []
        with torch.no_grad():
            for start in range(0, len(X), 4096):
                chunk = torch.from_numpy(encode_phi(X[start:start + 4096], self.shape_))
                out.append(torch.sigmoid(self.net_(chunk)).double().numpy())
        return np.concatenate(out) if out else np.zeros(0)

    def decision_function(self, X) -> np.ndarray:
        """Positive-class score in [0, 1]."""
        check_is_fitted(self, "degenerate_")
        return self._scores(X)

    def predict_proba(self, X) -> np.ndarray:
        p = self.decision_function(X)
        return np.stack([1 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        """Thresholded labels; an uncalibrated proxy predicts no positives."""
        check_is_fitted(self, "degenerate_")
        if not self.calibrated_:
            return np.zeros(len(list(X)), dtype=np.int64)
        return (self._scores(X) >= self.threshold_).astype(np.int64)

    def calibrate(self, X, y, target_precision=None) -> RewardProxy:
        """Recompute ``threshold_`` on a different labeled set."""
        check_is_fitted(self, "degenerate_")
        if self.degenerate_:
            return self
        self.threshold_, self.calibrated_ = calibrate_threshold(
            self._scores(X), y, target_precision or self.target_precision)
        return self

    @property
    def usable(self) -> bool:
        return not self.degenerate_ and self.calibrated_

    # -- persistence --

    def metadata(self) -> dict:
        return {"params": self.get_params(), "shape": list(self.shape_),
                "threshold": self.threshold_, "calibrated": self.calibrated_,
                "degenerate": self.degenerate_, "best_val_loss": self.best_val_loss_,
                "epochs_run": self.epochs_run_, "n_train": self.n_train_,
                "constant": getattr(self, "constant_", None)}

    def save(self, path, extra: dict | None = None) -> None:
        arrays = {}
        if self.net_ is not None:
            arrays = {k: v.numpy() for k, v in self.net_.state_dict().items()}
        meta = self.metadata()
        _blob.save(path, arrays, meta, sidecar=dict(meta, **(extra or {})))

    @classmethod
    def load(cls, path) -> RewardProxy:
        arrays, meta = _blob.load(path)
        proxy = cls(**meta["params"])
        proxy.classes_ = np.array([0, 1])
        proxy.shape_ = tuple(meta["shape"])
        proxy.threshold_ = meta["threshold"]
        proxy.calibrated_ = meta["calibrated"]
        proxy.degenerate_ = meta["degenerate"]
        proxy.best_val_loss_ = meta["best_val_loss"]
        proxy.epochs_run_ = meta["epochs_run"]
        proxy.n_train_ = meta["n_train"]
        if proxy.degenerate_:
            proxy.constant_ = meta["constant"]
            proxy.net_ = None
        else:
            net = _ProxyNet(proxy.shape_, proxy.channels, proxy.hidden, proxy.kernel_size,
                            proxy.dropout, proxy.pooling)
            net.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
            net.eval()
            proxy.net_ = net
        return proxy


def train_proxy(labeled: LabeledSubset, **hyper) -> RewardProxy:
    """Fit a :class:`RewardProxy` on the definite labels of ``labeled``."""
    states, y = labeled.usable()
    return RewardProxy(**hyper).fit(states, y)


def label_dataset(dg: AbstractDataset, proxy: RewardProxy, fallback=None) -> AbstractDataset:
    """Attach a 0/1 reward to every transition from its successor's ``phi``.

    A degenerate proxy is bypassed: ``fallback`` (default: the ground-truth
    labeler) labels the successors directly.
    """
    dst_ids = np.unique(dg.dst)
    per_state = np.zeros(len(dg.states), dtype=np.float64)
    if len(dst_ids):
        succ = [dg.states[i] for i in dst_ids]
        if proxy.degenerate_:
            labeler = fallback or GroundTruthLabeler(dg.goal)
            vals = np.array([labeler(s) or 0 for s in succ], dtype=np.float64)
        else:
            vals = proxy.predict(succ).astype(np.float64)
        per_state[dst_ids] = vals
    return dg.with_rewards(per_state[dg.dst])
