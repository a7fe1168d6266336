"""Critic training data built from trajectories.

The label for a frame pair (i, i+dt) inside a length-T trajectory is
dt / (T - i): the signed fraction of remaining progress covered between the
two frames.  Four construction strategies harden the dataset:

1. static-scene filtering: pairs whose rasters barely differ get label 0;
2. joint sampling of a 4-sample group covering short/long range both ways;
3. paired completion labels (done / not-done) from the same trajectory,
   skipping the ambiguous band near the end;
4. occasional task-text mismatch with label forced to 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .trajectory import Frame, Trajectory, frame_from_json, frame_to_json

# Fraction-of-trajectory thresholds for completion labels.  Indices at or
# beyond DONE_LO but not beyond DONE_HI are never labeled.
DONE_LO = 0.8
DONE_HI = 0.95


class PairKind(Enum):
    PROGRESS = "progress"
    COMPLETION = "completion"
    MISMATCH = "mismatch"


@dataclass(frozen=True)
class PairSample:
    frame_a: Frame
    frame_b: Frame
    task_text: str
    label: float  # in [-1, 1]
    kind: PairKind = PairKind.PROGRESS
    source_id: str = ""


@dataclass(frozen=True)
class CompletionSample:
    frame: Frame
    task_text: str
    done_label: int  # 0 or 1
    source_id: str = ""


def progress_label(T: int, i: int, delta_t: int) -> float:
    """dt / (T - i), the signed share of remaining progress between frames."""
    if not 0 <= i < T:
        raise ValueError(f"index {i} outside [0, {T})")
    if not -i + 1 <= delta_t <= T - i:
        raise ValueError(f"delta_t {delta_t} outside legal window [{-i + 1}, {T - i}]")
    # Reversed long-range pairs can lose more than the remaining progress;
    # the label is clamped to the delta range the critic emits.
    return max(-1.0, min(1.0, delta_t / (T - i)))


def raster_diff_fraction(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of cells whose absolute difference exceeds one 8-bit level."""
    return float(np.mean(np.abs(a - b) > (1.0 / 255.0)))


def build_pair_group(
    traj: Trajectory, i: int, delta_t: int, sigma: float
) -> list[PairSample]:
    """Four related samples for one (i, i+dt) draw.

    Emits (i, i+1), (i+1, i), (i, i+dt), (i+dt, i); each direction is labeled
    with its own remaining-frames denominator.  Any pair whose raster
    difference fraction falls below ``sigma`` has its label overridden to 0.
    """
    if not 0.0 < sigma < 1.0:
        raise ValueError("sigma must be in (0, 1)")
    T = len(traj)
    j = i + delta_t
    if not 0 <= i + 1 <= T - 1 or not 0 <= j <= T - 1:
        raise ValueError(f"pair indices out of range for T={T}: i={i}, delta_t={delta_t}")

    out = []
    for a, b in ((i, i + 1), (i + 1, i), (i, j), (j, i)):
        label = progress_label(T, a, b - a)
        fa, fb = traj.frames[a], traj.frames[b]
        if raster_diff_fraction(fa.raster, fb.raster) < sigma:
            label = 0.0
        out.append(
            PairSample(
                frame_a=fa,
                frame_b=fb,
                task_text=traj.task_text,
                label=label,
                kind=PairKind.PROGRESS,
                source_id=traj.source_id,
            )
        )
    return out


def completion_bands(T: int) -> tuple[range, range]:
    """(incomplete indices, complete indices) for a length-T trajectory."""
    lo = DONE_LO * T
    stop = int(lo) if lo == int(lo) else math.ceil(lo)  # strict i < 0.8T
    incomplete = range(0, min(stop, T))
    complete = range(math.floor(DONE_HI * T) + 1, T)  # strict i > 0.95T
    return incomplete, complete


def sample_completion_pair(
    traj: Trajectory, rng: np.random.Generator
) -> tuple[CompletionSample, CompletionSample]:
    """One done and one not-done sample from the same trajectory.

    Indices inside the ambiguous band [0.8T, 0.95T] are never used.
    """
    T = len(traj)
    incomplete, complete = completion_bands(T)
    if len(complete) == 0 or len(incomplete) == 0:
        raise ValueError("trajectory too short")
    i0 = int(rng.integers(incomplete.start, incomplete.stop))
    i1 = int(rng.integers(complete.start, complete.stop))
    return (
        CompletionSample(traj.frames[i0], traj.task_text, 0, traj.source_id),
        CompletionSample(traj.frames[i1], traj.task_text, 1, traj.source_id),
    )


def maybe_mismatch(
    sample: PairSample,
    corpus_tasks: Sequence[str],
    p: float,
    rng: np.random.Generator,
) -> PairSample:
    """Strategy 4: with probability p, swap in a foreign task text and zero the label."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if p == 0.0 or rng.random() >= p:
        return sample
    others = sorted({t for t in corpus_tasks if t != sample.task_text})
    if not others:
        raise ValueError("corpus needs at least two distinct task texts")
    text = others[int(rng.integers(len(others)))]
    return replace(sample, task_text=text, label=0.0, kind=PairKind.MISMATCH)


@dataclass
class SamplerConfig:
    sigma: float = 0.01
    mismatch_p: float = 0.05
    groups_per_trajectory: int = 8
    completion_pairs_per_trajectory: int = 2
    seed: int = 0


def sample_pair_indices(T: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform (i, dt) with dt != 0 and all four group pairs label-legal.

    i >= 1 keeps the short-range reversed pair (i+1, i) inside the label
    window, and dt <= T-1-i keeps the long-range target on an existing frame.
    """
    while True:
        i = int(rng.integers(1, T - 1))
        dt = int(rng.integers(-i + 1, T - i))
        if dt != 0:
            return i, dt


def build_dataset(
    trajectories: Sequence[Trajectory], config: SamplerConfig
) -> tuple[list[PairSample], list[CompletionSample]]:
    """Full dataset: pair groups plus completion pairs over all trajectories."""
    rng = np.random.default_rng(config.seed)
    corpus_tasks = [t.task_text for t in trajectories]
    mismatch_p = config.mismatch_p if len(set(corpus_tasks)) >= 2 else 0.0
    pairs: list[PairSample] = []
    completions: list[CompletionSample] = []
    for traj in trajectories:
        for _ in range(config.groups_per_trajectory):
            i, dt = sample_pair_indices(len(traj), rng)
            for sample in build_pair_group(traj, i, dt, config.sigma):
                pairs.append(maybe_mismatch(sample, corpus_tasks, mismatch_p, rng))
        _, complete = completion_bands(len(traj))
        if len(complete) > 0:
            for _ in range(config.completion_pairs_per_trajectory):
                completions.extend(sample_completion_pair(traj, rng))
    return pairs, completions


def save_dataset(
    pairs: Iterable[PairSample],
    completions: Iterable[CompletionSample],
    path: str | Path,
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in pairs:
            rec = {
                "type": "pair",
                "kind": s.kind.value,
                "task_text": s.task_text,
                "label": s.label,
                "source_id": s.source_id,
                "frame_a": frame_to_json(s.frame_a),
                "frame_b": frame_to_json(s.frame_b),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for c in completions:
            rec = {
                "type": "completion",
                "task_text": c.task_text,
                "done_label": c.done_label,
                "source_id": c.source_id,
                "frame": frame_to_json(c.frame),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> tuple[list[PairSample], list[CompletionSample]]:
    pairs: list[PairSample] = []
    completions: list[CompletionSample] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec["type"] == "pair":
                pairs.append(
                    PairSample(
                        frame_a=frame_from_json(rec["frame_a"]),
                        frame_b=frame_from_json(rec["frame_b"]),
                        task_text=rec["task_text"],
                        label=rec["label"],
                        kind=PairKind(rec["kind"]),
                        source_id=rec["source_id"],
                    )
                )
            else:
                completions.append(
                    CompletionSample(
                        frame=frame_from_json(rec["frame"]),
                        task_text=rec["task_text"],
                        done_label=rec["done_label"],
                        source_id=rec["source_id"],
                    )
                )
    return pairs, completions
