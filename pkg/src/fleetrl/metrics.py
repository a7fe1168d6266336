"""Trajectory-level critic evaluation metrics.

A critic is scored by querying it for pairwise progress deltas along a frame
sequence, accumulating those deltas into a per-frame value series, and rank
correlating the values with time.  Four numbers summarize a trajectory:

* ``voc``   - rank correlation of accumulated values with the frame index.
* ``vroc``  - same computation on the time-reversed sequence, sign-fixed so
  that an ideal critic scores +1 on both.
* ``voc_f1`` - harmonic mean of the two; undefined when their sum is <= 0.
* ``nr``    - fraction of strictly negative deltas (regression/stagnation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class DeltaSeries:
    """Pairwise progress deltas for consecutive frame pairs, each in [-1, 1].

    ``step`` records the frame stride used when querying the critic
    (frames per delta); it does not affect any metric.
    """

    deltas: tuple[float, ...]
    step: int = 1

    def __post_init__(self):
        for d in self.deltas:
            if not -1.0 <= d <= 1.0:
                raise ValueError(f"delta {d} outside [-1, 1]")
        if self.step < 1:
            raise ValueError("step must be >= 1")

    def __len__(self) -> int:
        return len(self.deltas)


@dataclass(frozen=True)
class ValueSeries:
    """Accumulated per-frame progress values in [0, 1]; values[0] == 0."""

    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values or self.values[0] != 0.0:
            raise ValueError("value series must start at 0")
        for v in self.values:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"value {v} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class MetricReport:
    voc: float
    vroc: float
    voc_f1: Optional[float]  # None when voc + vroc <= 0
    nr: float


def _accumulate(deltas: Sequence[float], clamp: bool) -> list[float]:
    values = [0.0]
    v = 0.0
    for d in deltas:
        v = v + d * (1.0 - v)
        if clamp:
            v = min(1.0, max(0.0, v))
        values.append(v)
    return values


def accumulate_values(deltas: DeltaSeries) -> ValueSeries:
    """Fold deltas into per-frame values: v_next = v + d * (1 - v), clamped.

    The clamp to [0, 1] protects against learned-critic deltas driving the
    series outside its nominal range.  An empty delta series yields the
    single-element series [0].
    """
    return ValueSeries(tuple(_accumulate(deltas.deltas, clamp=True)))


def rank_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman correlation with average ranks on ties.

    Returns 0.0 when either input has zero variance (all-equal convention).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValueError("length mismatch")
    if len(x) < 2:
        raise ValueError("need at least two points")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    if np.ptp(rx) == 0.0 or np.ptp(ry) == 0.0:
        return 0.0
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=float)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def voc(values: ValueSeries) -> float:
    """Rank correlation of accumulated values against the frame index."""
    if len(values) < 2:
        raise ValueError("need at least two frames")
    return rank_correlation(values.values, range(len(values)))


def vroc(deltas_of_reversed_sequence: DeltaSeries) -> float:
    """Value-reversed-order correlation.

    The deltas come from querying the critic on the frame sequence played
    backwards, so an ideal critic emits negative deltas and the accumulated
    series decreases.  The accumulation is left unclamped (a clamp at 0 would
    freeze a decreasing series immediately) and the correlation sign is
    flipped so that the ideal critic scores +1.
    """
    values = _accumulate(deltas_of_reversed_sequence.deltas, clamp=False)
    return -rank_correlation(values, range(len(values)))


def voc_f1(voc_value: float, vroc_value: float) -> Optional[float]:
    """Harmonic mean of voc and vroc; None when their sum is <= 0."""
    denom = voc_value + vroc_value
    if denom <= 0.0:
        return None
    return 2.0 * voc_value * vroc_value / denom


def negative_rate(deltas: DeltaSeries) -> float:
    """Fraction of strictly negative deltas."""
    if len(deltas) == 0:
        raise ValueError("no deltas")
    return sum(1 for d in deltas.deltas if d < 0.0) / len(deltas)


def report(forward: DeltaSeries, reversed_: DeltaSeries) -> MetricReport:
    """Full metric report from forward and reversed-sequence delta queries."""
    v = voc(accumulate_values(forward))
    vr = vroc(reversed_)
    return MetricReport(voc=v, vroc=vr, voc_f1=voc_f1(v, vr), nr=negative_rate(forward))
