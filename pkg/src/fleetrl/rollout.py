"""Episode glue between the simulator and the policy.

Builds PolicyInputs (observation features + task one-hot + rolling action
history), collects scripted-expert demonstrations in policy format, and runs
policy episodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .actions import ActionCommand
from .policy import (
    HISTORY_LEN,
    ActionTokens,
    PolicyInput,
    PolicyModel,
    action_to_tokens,
    sample_action,
)
from .sim import (
    DONE_PROGRESS,
    RobotProfile,
    SimObservation,
    TaskSpec,
    WorldState,
    oracle_progress,
    reset,
    scripted_expert,
    step,
)


def task_vector(task_text: str, vocab: Sequence[str]) -> np.ndarray:
    vec = np.zeros(len(vocab))
    if task_text in vocab:
        vec[list(vocab).index(task_text)] = 1.0
    return vec


class HistoryBuffer:
    """Rolling window of the last H actions, zero-padded at episode start."""

    def __init__(self):
        self._acts: list[ActionCommand] = []

    def push(self, action: ActionCommand) -> None:
        self._acts.append(action)

    def window(self) -> tuple[Optional[ActionCommand], ...]:
        tail = self._acts[-HISTORY_LEN:]
        pad = (None,) * (HISTORY_LEN - len(tail))
        return pad + tuple(tail)


def make_input(obs: SimObservation, task_vec: np.ndarray, history: HistoryBuffer) -> PolicyInput:
    return PolicyInput(features=obs.features, task_vector=task_vec, history=history.window())


def collect_demo(
    spec: TaskSpec,
    seed: int,
    vocab: Sequence[str],
    max_steps: int = 100,
    robot: RobotProfile = RobotProfile(),
    speed: float = 1.0,
    override_state: Optional[WorldState] = None,
) -> list[tuple[PolicyInput, ActionTokens]]:
    """One scripted-expert episode as (input, tokens) pairs for NLL training."""
    vec = task_vector(spec.task_text, vocab)
    state, obs = reset(spec, seed=seed, robot=robot, override_state=override_state)
    history = HistoryBuffer()
    out = []
    for _ in range(max_steps):
        action = scripted_expert(spec, state, speed=speed)
        tokens = ActionTokens(action_to_tokens(action), (0.0,) * 7, policy_version=0)
        out.append((make_input(obs, vec, history), tokens))
        history.push(action)
        state, obs, done = step(state, action, spec, robot)
        if done:
            break
    return out


def collect_noisy_demo(
    spec: TaskSpec,
    seed: int,
    vocab: Sequence[str],
    noise_mm: float = 10.0,
    flip_p: float = 0.08,
    max_steps: int = 100,
    robot: RobotProfile = RobotProfile(),
    override_state: Optional[WorldState] = None,
) -> list[tuple[PolicyInput, ActionTokens]]:
    """Expert demo executed under injected noise, labeled with the clean action.

    The noisy action is what actually runs (and what lands in the history
    window), while the supervision target stays the expert's choice, so the
    cloned policy sees the off-distribution states its own sampling will visit
    and learns the recovery action for each.
    """
    vec = task_vector(spec.task_text, vocab)
    rng = np.random.default_rng(seed + 31337)
    state, obs = reset(spec, seed=seed, robot=robot, override_state=override_state)
    history = HistoryBuffer()
    out = []
    for _ in range(max_steps):
        expert = scripted_expert(spec, state)
        tokens = ActionTokens(action_to_tokens(expert), (0.0,) * 7, policy_version=0)
        out.append((make_input(obs, vec, history), tokens))
        jitter = rng.integers(-int(noise_mm), int(noise_mm) + 1, size=3)
        gripper = expert.open
        if rng.random() < flip_p:
            gripper = 1 - gripper
        executed = ActionCommand(
            dx=int(np.clip(expert.dx + jitter[0], -100, 100)),
            dy=int(np.clip(expert.dy + jitter[1], -100, 100)),
            dz=int(np.clip(expert.dz + jitter[2], -100, 100)),
            droll=expert.droll,
            dpitch=expert.dpitch,
            dyaw=expert.dyaw,
            open=gripper,
        )
        history.push(executed)
        state, obs, done = step(state, executed, spec, robot)
        if done:
            break
    return out


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    final_progress: float
    states: list[WorldState]
    observations: list[SimObservation]
    actions: list[ActionCommand]


def run_policy_episode(
    model: PolicyModel,
    spec: TaskSpec,
    seed: int,
    vocab: Sequence[str],
    temperature: float = 1.0,
    max_steps: int = 60,
    robot: RobotProfile = RobotProfile(),
    rng_seed: Optional[int] = None,
) -> EpisodeResult:
    vec = task_vector(spec.task_text, vocab)
    state, obs = reset(spec, seed=seed, robot=robot)
    history = HistoryBuffer()
    base = seed if rng_seed is None else rng_seed
    states = [state.copy()]
    observations = [obs]
    actions = []
    done = False
    t = 0
    for t in range(1, max_steps + 1):
        inp = make_input(obs, vec, history)
        action, _, _, _ = sample_action(model, inp, rng_seed=base * 100003 + t, temperature=temperature)
        history.push(action)
        state, obs, done = step(state, action, spec, robot)
        states.append(state.copy())
        observations.append(obs)
        actions.append(action)
        if done:
            break
    return EpisodeResult(
        success=done,
        steps=t,
        final_progress=oracle_progress(state, spec),
        states=states,
        observations=observations,
        actions=actions,
    )


def collect_transitions(
    model: PolicyModel,
    spec: TaskSpec,
    seed: int,
    vocab: Sequence[str],
    critic,
    temperature: float = 1.0,
    max_steps: int = 60,
    robot: RobotProfile = RobotProfile(),
    lag_ms: int = 0,
    rng_seed: Optional[int] = None,
    override_state: Optional[WorldState] = None,
):
    """One policy episode with per-step critic rewards, as PPO transitions.

    The reward for step t is the critic's progress delta between the
    observations before and after the action; the episode ends when the
    critic's done check fires or the step cap truncates it (bootstrap on
    truncation only).  Returns (transitions, bootstrap_value, success).
    """
    from .critic import CriticQuery
    from .policy import values_of
    from .ppo import Transition
    from .sim import obs_to_frame

    vec = task_vector(spec.task_text, vocab)
    state, obs = reset(spec, seed=seed, robot=robot, override_state=override_state)
    frame = obs_to_frame(obs, state, spec)
    history = HistoryBuffer()
    base = seed if rng_seed is None else rng_seed
    transitions = []
    done = 0
    inp = make_input(obs, vec, history)
    for t in range(1, max_steps + 1):
        action, tokens, value, logprob_sum = sample_action(
            model, inp, rng_seed=base * 100003 + t, temperature=temperature
        )
        history.push(action)
        obs_ts = state.timestamp_ms
        state, obs, _ = step(state, action, spec, robot)
        next_frame = obs_to_frame(obs, state, spec)
        reward = critic.progress_delta(CriticQuery(frame, next_frame, spec.task_text)).delta
        done = critic.done_check(next_frame, spec.task_text)
        transitions.append(
            Transition(
                input=inp,
                tokens=tokens,
                logprob_old=logprob_sum,
                reward=reward,
                done=done,
                value_old=value,
                robot_id=robot.robot_id,
                policy_version=model.version,
                obs_timestamp_ms=obs_ts,
                act_timestamp_ms=obs_ts + lag_ms,
            )
        )
        frame = next_frame
        inp = make_input(obs, vec, history)
        if done:
            break
    bootstrap = 0.0 if done else float(values_of(model, [inp])[0])
    return transitions, bootstrap, bool(done)


def greedy_success_rate(
    model: PolicyModel,
    spec: TaskSpec,
    seeds: Sequence[int],
    vocab: Sequence[str],
    max_steps: int = 60,
) -> float:
    wins = sum(
        run_policy_episode(model, spec, s, vocab, temperature=0.0, max_steps=max_steps).success
        for s in seeds
    )
    return wins / len(seeds)
