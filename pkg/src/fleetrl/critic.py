"""Reward interface: pairwise progress delta and done check.

Two backends share one protocol:

* ``OracleCritic`` reads simulator ground truth carried on frames and inverts
  the value-accumulation recursion, so accumulated oracle deltas reproduce
  absolute progress exactly.
* ``LearnedCritic`` is a small feed-forward regressor trained on pair-sampler
  output, optionally conditioned on a compressed reference trajectory
  (in-context mode).  The backend boundary is the class interface, so a
  heavier model can be slotted in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

from .metrics import DeltaSeries, MetricReport, report
from .pairs import CompletionSample, PairSample
from .trajectory import Frame, Trajectory

DONE_THRESHOLD = 0.95
_EPS = 1e-6


@dataclass(frozen=True)
class CriticQuery:
    frame_a: Frame
    frame_b: Frame
    task_text: str
    reference: Optional[np.ndarray] = None  # summary vector, see reference_summary

    def __post_init__(self):
        if self.frame_a.raster.shape != self.frame_b.raster.shape:
            raise ValueError("frames must share raster dimensions")


@dataclass(frozen=True)
class CriticResponse:
    delta: float  # in [-1, 1]
    latency_ms: int = 0


class Critic(Protocol):
    def progress_delta(self, query: CriticQuery) -> CriticResponse: ...

    def done_check(self, frame: Frame, task_text: str) -> int: ...


def reference_summary(traj: Trajectory) -> np.ndarray:
    """Compressed in-context reference: mean, final, and start frame features."""
    feats = np.stack([f.features for f in traj.frames])
    return np.concatenate([feats.mean(axis=0), feats[-1], feats[0]])


class OracleCritic:
    """Ground-truth backend; frames must carry truth_progress/truth_task."""

    def progress_delta(self, query: CriticQuery) -> CriticResponse:
        pa = query.frame_a.truth_progress
        pb = query.frame_b.truth_progress
        if pa is None or pb is None:
            raise ValueError("oracle critic needs truth_progress on frames")
        truth_task = query.frame_a.truth_task
        if truth_task is not None and query.task_text != truth_task:
            return CriticResponse(0.0)  # mismatched instruction: no progress
        if pb == pa:
            return CriticResponse(0.0)
        # Invert v' = v + c(1-v).  The denominator floor keeps regression away
        # from a fully-complete state expressible (as -1) rather than silently 0.
        delta = (pb - pa) / max(1.0 - pa, _EPS)
        return CriticResponse(float(np.clip(delta, -1.0, 1.0)))

    def done_check(self, frame: Frame, task_text: str) -> int:
        if frame.truth_progress is None:
            raise ValueError("oracle critic needs truth_progress on frames")
        return int(frame.truth_progress >= DONE_THRESHOLD)


@dataclass
class FeatureSpec:
    feature_len: int
    task_vocab: list[str]
    in_context: bool

    def task_vector(self, task_text: str) -> np.ndarray:
        vec = np.zeros(len(self.task_vocab))
        if task_text in self.task_vocab:
            vec[self.task_vocab.index(task_text)] = 1.0
        return vec

    @property
    def ref_len(self) -> int:
        return 3 * self.feature_len if self.in_context else 0

    @property
    def pair_input_len(self) -> int:
        return 2 * self.feature_len + len(self.task_vocab) + self.ref_len + (1 if self.in_context else 0)

    @property
    def done_input_len(self) -> int:
        return self.feature_len + len(self.task_vocab)


class _CriticNet(nn.Module):
    def __init__(self, spec: FeatureSpec, hidden: int):
        super().__init__()
        self.pair = nn.Sequential(
            nn.Linear(spec.pair_input_len, hidden),
            nn.Tanh(),
            nn.Linear(hidden, hidden),
            nn.Tanh(),
            nn.Linear(hidden, 1),
            nn.Tanh(),
        )
        self.done = nn.Sequential(
            nn.Linear(spec.done_input_len, hidden // 2),
            nn.Tanh(),
            nn.Linear(hidden // 2, 1),
        )


@dataclass
class CriticFitConfig:
    hidden: int = 64
    learning_rate: float = 1e-3
    epochs: int = 150
    batch_size: int = 256
    in_context: bool = False
    reference_dropout: float = 0.5  # train with and without the reference
    seed: int = 0


class LearnedCritic:
    """Small regressor backend; deterministic given (parameters, query)."""

    def __init__(self, net: _CriticNet, spec: FeatureSpec, version: int):
        self.net = net
        self.spec = spec
        self.version = version
        self.net.eval()

    def _pair_input(self, query: CriticQuery) -> torch.Tensor:
        task_vec = self.spec.task_vector(query.task_text)
        parts = [query.frame_a.features, query.frame_b.features]
        if self.spec.in_context:
            if query.reference is not None:
                # One-shot rows carry the reference instead of the instruction.
                parts += [np.zeros_like(task_vec), query.reference, np.ones(1)]
            else:
                parts += [task_vec, np.zeros(self.spec.ref_len), np.zeros(1)]
        else:
            parts.append(task_vec)
        return torch.tensor(np.concatenate(parts), dtype=torch.float64)

    def progress_delta(self, query: CriticQuery) -> CriticResponse:
        with torch.no_grad():
            out = self.net.pair(self._pair_input(query))
        return CriticResponse(float(np.clip(out.item(), -1.0, 1.0)))

    def done_check(self, frame: Frame, task_text: str) -> int:
        x = torch.tensor(
            np.concatenate([frame.features, self.spec.task_vector(task_text)]),
            dtype=torch.float64,
        )
        with torch.no_grad():
            logit = self.net.done(x)
        return int(torch.sigmoid(logit).item() >= 0.5)


def fit_learned_critic(
    pairs: Sequence[PairSample],
    completions: Sequence[CompletionSample],
    config: CriticFitConfig,
    references: Optional[dict[str, np.ndarray]] = None,
    base: Optional[LearnedCritic] = None,
) -> LearnedCritic:
    """Minimize squared error on deltas plus cross-entropy on done labels.

    ``references`` maps source_id to a reference summary for in-context mode.
    Returns a new model; the version counter continues from ``base``.
    """
    if not pairs:
        raise ValueError("dataset is empty")
    labels = {round(s.label, 9) for s in pairs}
    if len(labels) < 2:
        raise ValueError("degenerate dataset: single label value")

    torch.manual_seed(config.seed)
    feature_len = len(pairs[0].frame_a.features)
    vocab = sorted({s.task_text for s in pairs} | {c.task_text for c in completions})
    spec = FeatureSpec(feature_len=feature_len, task_vocab=vocab, in_context=config.in_context)
    net = _CriticNet(spec, config.hidden).double()

    rng = np.random.default_rng(config.seed)
    rows = []
    for s in pairs:
        task_vec = spec.task_vector(s.task_text)
        parts = [s.frame_a.features, s.frame_b.features]
        if config.in_context:
            ref = references.get(s.source_id) if references else None
            if ref is not None and rng.random() >= config.reference_dropout:
                # Reference rows drop the instruction vector so the model is
                # forced to read the goal out of the reference; this matches
                # inference on instructions outside the training vocabulary.
                parts += [np.zeros_like(task_vec), ref, np.ones(1)]
            else:
                parts += [task_vec, np.zeros(spec.ref_len), np.zeros(1)]
        else:
            parts.append(task_vec)
        rows.append(np.concatenate(parts))
    X_pair = torch.tensor(np.stack(rows), dtype=torch.float64)
    y_pair = torch.tensor([s.label for s in pairs], dtype=torch.float64).unsqueeze(1)

    if completions:
        X_done = torch.tensor(
            np.stack(
                [np.concatenate([c.frame.features, spec.task_vector(c.task_text)]) for c in completions]
            ),
            dtype=torch.float64,
        )
        y_done = torch.tensor([float(c.done_label) for c in completions], dtype=torch.float64).unsqueeze(1)
    else:
        X_done = y_done = None

    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    mse = nn.MSELoss()
    bce = nn.BCEWithLogitsLoss()
    n = len(X_pair)
    for _ in range(config.epochs):
        perm = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss = mse(net.pair(X_pair[idx]), y_pair[idx])
            if X_done is not None:
                loss = loss + bce(net.done(X_done), y_done)
            opt.zero_grad()
            loss.backward()
            opt.step()

    version = (base.version if base else 0) + 1
    return LearnedCritic(net, spec, version)


# --- model files -------------------------------------------------------------


def save_model(model: LearnedCritic, path: str | Path) -> None:
    state = model.net.state_dict()
    header = {
        "version": model.version,
        "feature_spec": {
            "feature_len": model.spec.feature_len,
            "task_vocab": model.spec.task_vocab,
            "in_context": model.spec.in_context,
        },
        "hidden": model.net.pair[0].out_features,
        "tensors": [[k, list(v.shape)] for k, v in state.items()],
    }
    blob = b"".join(state[k].numpy().astype(np.float64).tobytes() for k, _ in header["tensors"])
    with open(path, "wb") as fh:
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(len(head).to_bytes(4, "big"))
        fh.write(head)
        fh.write(blob)


def load_model(path: str | Path) -> LearnedCritic:
    with open(path, "rb") as fh:
        head_len = int.from_bytes(fh.read(4), "big")
        header = json.loads(fh.read(head_len).decode("utf-8"))
        blob = fh.read()
    fs = header["feature_spec"]
    spec = FeatureSpec(fs["feature_len"], fs["task_vocab"], fs["in_context"])
    net = _CriticNet(spec, header["hidden"]).double()
    state = {}
    offset = 0
    for key, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=np.float64, count=count, offset=offset).reshape(shape)
        state[key] = torch.tensor(arr, dtype=torch.float64)
        offset += count * 8
    net.load_state_dict(state)
    return LearnedCritic(net, spec, header["version"])


# --- evaluation harness ------------------------------------------------------


def trajectory_deltas(
    critic: Critic,
    traj: Trajectory,
    reference: Optional[np.ndarray] = None,
    reverse: bool = False,
) -> DeltaSeries:
    frames = list(reversed(traj.frames)) if reverse else traj.frames
    deltas = []
    for a, b in zip(frames, frames[1:]):
        resp = critic.progress_delta(CriticQuery(a, b, traj.task_text, reference))
        deltas.append(resp.delta)
    return DeltaSeries(tuple(deltas))


def evaluate_trajectory(
    critic: Critic, traj: Trajectory, reference: Optional[np.ndarray] = None
) -> MetricReport:
    forward = trajectory_deltas(critic, traj, reference)
    backward = trajectory_deltas(critic, traj, reference, reverse=True)
    return report(forward, backward)


def evaluate_trajectories(
    critic: Critic, trajectories: Sequence[Trajectory], reference: Optional[np.ndarray] = None
) -> MetricReport:
    """Mean-aggregated report over trajectories; voc_f1 from the mean voc/vroc."""
    from .metrics import voc_f1 as _voc_f1

    reports = [evaluate_trajectory(critic, t, reference) for t in trajectories]
    voc = float(np.mean([r.voc for r in reports]))
    vroc = float(np.mean([r.vroc for r in reports]))
    nr = float(np.mean([r.nr for r in reports]))
    return MetricReport(voc=voc, vroc=vroc, voc_f1=_voc_f1(voc, vroc), nr=nr)
