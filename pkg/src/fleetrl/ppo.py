"""PPO trainer: GAE advantages, clipped surrogate, demo-mix scheduling.

Log-probabilities are always recomputed from the current parameters inside
the update; the rollout's logprob_old is the importance baseline only.  With
unchanged parameters the first ratio pass is exactly 1, so clipping is
inactive at the start of every update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .policy import ActionTokens, PolicyInput, PolicyModel, batched_logprobs


@dataclass(frozen=True)
class Transition:
    """One PPO unit: lagged (observation, action) with reward and snapshots."""

    input: PolicyInput
    tokens: ActionTokens
    logprob_old: float
    reward: float
    done: int
    value_old: float
    robot_id: str
    policy_version: int
    obs_timestamp_ms: int
    act_timestamp_ms: int

    def __post_init__(self):
        if self.act_timestamp_ms < self.obs_timestamp_ms:
            raise ValueError("act_timestamp_ms must be >= obs_timestamp_ms")


@dataclass
class PpoConfig:
    epsilon: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 4
    minibatch_size: int = 64
    demo_mix_every: int = 4
    learning_rate: float = 3e-4
    target_kl: float | None = None  # early-stop epochs when mean KL exceeds this

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must be in [0, 1]")
        if self.demo_mix_every < 1:
            raise ValueError("demo_mix_every must be >= 1")


@dataclass
class AdvantageBatch:
    advantages: np.ndarray
    returns: np.ndarray
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        self.returns = np.asarray(self.returns, dtype=np.float64)
        self.mean = float(self.advantages.mean()) if len(self.advantages) else 0.0
        self.std = float(self.advantages.std()) if len(self.advantages) else 0.0

    def normalized(self) -> np.ndarray:
        return (self.advantages - self.mean) / max(self.std, 1e-8)


def compute_gae(
    episode: Sequence[Transition], bootstrap_value: float, gamma: float, lam: float
) -> AdvantageBatch:
    """delta_t = r_t + gamma*V(s_{t+1})*(1-done_t) - V(s_t); A_t via (gamma*lam) carry."""
    if not episode:
        raise ValueError("episode is empty")
    n = len(episode)
    adv = np.zeros(n)
    carry = 0.0
    for t in reversed(range(n)):
        tr = episode[t]
        next_value = bootstrap_value if t == n - 1 else episode[t + 1].value_old
        nonterminal = 1.0 - tr.done
        delta = tr.reward + gamma * next_value * nonterminal - tr.value_old
        carry = delta + gamma * lam * nonterminal * carry
        adv[t] = carry
    returns = adv + np.array([tr.value_old for tr in episode])
    return AdvantageBatch(advantages=adv, returns=returns)


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, epsilon: float) -> np.ndarray:
    """Per-sample min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv)


def ppo_update(
    model: PolicyModel,
    batch: Sequence[Transition],
    adv: AdvantageBatch,
    config: PpoConfig,
    rng_seed: int = 0,
) -> tuple[PolicyModel, dict]:
    """Multi-epoch clipped-surrogate update; returns (new model, stats).

    A non-finite loss at any point aborts the whole update and returns the
    original snapshot untouched.
    """
    if len(batch) != len(adv.advantages):
        raise ValueError("batch and advantages disagree in length")
    if not all(np.isfinite(adv.advantages)) or not all(np.isfinite(adv.returns)):
        return model, {"aborted": True, "reason": "non-finite advantages"}

    x = torch.tensor(np.stack([tr.input.vector() for tr in batch]), dtype=torch.float64)
    rows = [tr.tokens.tokens for tr in batch]
    lp_old = torch.tensor([tr.logprob_old for tr in batch], dtype=torch.float64)
    a_norm = torch.tensor(adv.normalized(), dtype=torch.float64)
    rets = torch.tensor(adv.returns, dtype=torch.float64)

    net = model.clone_net()
    net.train()

    # Diagnostic pass before any gradient step: with recomputed logprobs the
    # ratios must be exactly 1 (single-engine contract).
    with torch.no_grad():
        lp0, _, _ = batched_logprobs(net, x, rows)
        r0 = torch.exp(lp0 - lp_old)
        pre_stats = {
            "pre_ratio_max_dev": float((r0 - 1.0).abs().max().item()),
            "pre_clip_fraction": float(((r0 - 1.0).abs() > config.epsilon).double().mean().item()),
            "pre_surrogate": float(
                torch.minimum(
                    r0 * a_norm, torch.clamp(r0, 1 - config.epsilon, 1 + config.epsilon) * a_norm
                )
                .mean()
                .item()
            ),
        }

    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(rng_seed)
    n = len(batch)
    clip_hits = []
    kls = []
    ents = []
    epochs_run = 0
    for _ in range(config.epochs):
        if config.target_kl is not None and epochs_run > 0:
            with torch.no_grad():
                lp_now, _, _ = batched_logprobs(net, x, rows)
                if float((lp_old - lp_now).mean().item()) > config.target_kl:
                    break
        epochs_run += 1
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = torch.from_numpy(perm[start : start + config.minibatch_size])
            lp, ent, value = batched_logprobs(net, x[idx], [rows[i] for i in idx])
            ratio = torch.exp(lp - lp_old[idx])
            surr = torch.minimum(
                ratio * a_norm[idx],
                torch.clamp(ratio, 1 - config.epsilon, 1 + config.epsilon) * a_norm[idx],
            )
            value_loss = ((value - rets[idx]) ** 2).mean()
            loss = -surr.mean() + config.value_coef * value_loss - config.entropy_coef * ent.mean()
            if not torch.isfinite(loss):
                return model, {"aborted": True, "reason": "non-finite loss", **pre_stats}
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                clip_hits.append(((ratio - 1.0).abs() > config.epsilon).double().mean().item())
                kls.append((lp_old[idx] - lp).mean().item())
                ents.append(ent.mean().item())

    new_model = PolicyModel(net, model.input_len, model.hidden, model.version + 1)
    stats = {
        "aborted": False,
        "clip_fraction": float(np.mean(clip_hits)),
        "approx_kl": float(np.mean(kls)),
        "entropy": float(np.mean(ents)),
        "epochs_run": epochs_run,
        **pre_stats,
    }
    return new_model, stats


def mix_demo_batches(updates_completed: int, demo_buffer_size: int, config: PpoConfig) -> bool:
    """True when the next step after ``updates_completed`` PPO updates is an NLL pass.

    An empty demo buffer silently disables mixing (baseline mode).
    """
    if demo_buffer_size == 0 or updates_completed == 0:
        return False
    return updates_completed % config.demo_mix_every == 0
