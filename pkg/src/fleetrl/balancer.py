"""Fleet statistics and dynamic sampling weights for under-learned robots."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

DEFAULT_WINDOW = 20
NEVER_REACHED = -1


@dataclass
class RobotStats:
    """Rolling success estimate over the last `window` episodes."""

    robot_id: str
    window: int = DEFAULT_WINDOW
    episodes_completed: int = 0
    last_update_ms: int = 0
    _outcomes: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        self._outcomes = deque(self._outcomes, maxlen=self.window)

    @property
    def success_rate(self) -> float:
        if not self._outcomes:
            return 0.0
        return sum(self._outcomes) / len(self._outcomes)

    def record(self, success: bool, timestamp_ms: int = 0) -> None:
        self._outcomes.append(int(success))
        self.episodes_completed += 1
        self.last_update_ms = timestamp_ms


def sampling_weights(stats: Sequence[RobotStats], floor: float = 0.05) -> dict[str, float]:
    """weight_i proportional to (1 - success_i) + floor, normalized to sum 1."""
    if not stats:
        raise ValueError("at least one robot required")
    if floor < 0:
        raise ValueError("floor must be >= 0")
    raw = np.array([(1.0 - s.success_rate) + floor for s in stats])
    total = raw.sum()
    if total == 0:
        raw = np.ones(len(stats))
        total = float(len(stats))
    return {s.robot_id: float(w / total) for s, w in zip(stats, raw)}


def episodes_to_threshold(
    success_curve: Sequence[int], threshold: float, window: int = DEFAULT_WINDOW
) -> int:
    """First episode index whose rolling success rate reaches threshold.

    Returns NEVER_REACHED when the curve never gets there.  A threshold of 0
    is satisfied at episode 0 by definition.
    """
    if len(success_curve) == 0:
        raise ValueError("success curve is empty")
    if threshold <= 0:
        return 0
    roll: deque = deque(maxlen=window)
    for i, s in enumerate(success_curve):
        roll.append(int(s))
        if sum(roll) / len(roll) >= threshold:
            return i
    return NEVER_REACHED


def compose_minibatch(
    weights: Mapping[str, float],
    pools: Mapping[str, Sequence],
    batch_size: int,
    rng_seed: int,
) -> list:
    """Draw transitions robot-by-robot according to the sampling weights.

    Robots with empty pools are excluded and their weight renormalized over
    the rest; realized composition tracks the weights in expectation.
    """
    avail = [r for r in weights if len(pools.get(r, ())) > 0]
    if not avail:
        raise ValueError("all pools empty")
    w = np.array([weights[r] for r in avail])
    w = w / w.sum()
    rng = np.random.default_rng(rng_seed)
    robots = rng.choice(len(avail), size=batch_size, p=w)
    out = []
    for k in robots:
        pool = pools[avail[k]]
        out.append(pool[int(rng.integers(0, len(pool)))])
    return out


def realized_composition(batch: Sequence, key=lambda tr: tr.robot_id) -> dict[str, float]:
    counts: dict[str, int] = {}
    for tr in batch:
        counts[key(tr)] = counts.get(key(tr), 0) + 1
    n = len(batch)
    return {r: c / n for r, c in counts.items()}
