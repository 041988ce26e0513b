"""Input checks shared by the estimators."""
from __future__ import annotations

import numbers

import numpy as np

from .goals import Goal
from .gridworld import GridState


def check_goal(goal) -> Goal:
    if not isinstance(goal, Goal):
        raise TypeError(f"expected a Goal, got {type(goal).__name__}")
    return goal


def check_states(X) -> list:
    """List of ``GridState``; raises on anything else."""
    X = list(X)
    for x in X:
        if not isinstance(x, GridState):
            raise TypeError(f"expected GridState items, got {type(x).__name__}")
    return X


def check_fraction(value, name: str, low_open: bool = True, high_open: bool = False) -> float:
    if not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number")
    v = float(value)
    lo_ok = v > 0 if low_open else v >= 0
    hi_ok = v < 1 if high_open else v <= 1
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name}={v} out of range")
    return v


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)
