"""Offline pipeline turning unlabeled gridworld transitions into per-goal
tabular policies and a supervised fine-tuning dataset."""

__version__ = "0.1.0"
