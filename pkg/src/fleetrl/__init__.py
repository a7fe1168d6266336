"""Desk-scale multi-robot RL: dense pairwise-progress rewards, PPO, async dispatch, HIL."""

__version__ = "0.1.0"
