"""Structured-token stochastic policy over delta-EEF actions.

Actions travel as a fixed textual template ("x: -47mm, ... open: 0") whose
seven numeric slots are the policy's tokens: three 201-way translation bins,
three 91-way rotation bins, and a 2-way gripper bin.  The trunk is a small
feed-forward network; a heavier actor can be swapped in behind the same
interface.  Sampled actions record their per-token log-probabilities, but the
trainer always recomputes them from parameters (never trusts the rollout
snapshot) so importance ratios start at exactly 1.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .actions import ROTATION_BOUND, TRANSLATION_BOUND, ActionCommand

HISTORY_LEN = 4
HEAD_SIZES = (201, 201, 201, 91, 91, 91, 2)
_ACTION_VEC_LEN = 7

_TEMPLATE = (
    "x: {dx}mm, y: {dy}mm, z: {dz}mm, roll: {droll} degrees, "
    "pitch: {dpitch} degrees, yaw: {dyaw} degrees, open: {open}"
)
# (literal preceding the number, field, bound) in template order
_FIELDS = [
    ("x: ", "dx", TRANSLATION_BOUND, "mm"),
    (", y: ", "dy", TRANSLATION_BOUND, "mm"),
    (", z: ", "dz", TRANSLATION_BOUND, "mm"),
    (", roll: ", "droll", ROTATION_BOUND, " degrees"),
    (", pitch: ", "dpitch", ROTATION_BOUND, " degrees"),
    (", yaw: ", "dyaw", ROTATION_BOUND, " degrees"),
    (", open: ", "open", 1, ""),
]


def encode_template(a: ActionCommand) -> str:
    return _TEMPLATE.format(
        dx=a.dx, dy=a.dy, dz=a.dz, droll=a.droll, dpitch=a.dpitch, dyaw=a.dyaw, open=a.open
    )


def decode_template(s: str) -> ActionCommand:
    """Parse a template string back into an ActionCommand.

    Errors name the first offending span (byte offset into the string).
    """
    pos = 0
    values = {}
    for literal, field, bound, suffix in _FIELDS:
        if not s.startswith(literal, pos):
            raise ValueError(f"expected {literal!r} at offset {pos}: {s[pos:pos + 12]!r}")
        pos += len(literal)
        end = pos
        if end < len(s) and s[end] == "-":
            end += 1
        while end < len(s) and s[end].isdigit():
            end += 1
        if end == pos or s[pos:end] == "-":
            raise ValueError(f"expected integer for {field} at offset {pos}: {s[pos:pos + 8]!r}")
        value = int(s[pos:end])
        lo = 0 if field == "open" else -bound
        if not lo <= value <= bound:
            raise ValueError(f"{field}={value} at offset {pos} outside [{lo}, {bound}]")
        values[field] = value
        pos = end
        if suffix and not s.startswith(suffix, pos):
            raise ValueError(f"expected {suffix!r} at offset {pos}: {s[pos:pos + 12]!r}")
        pos += len(suffix)
    if pos != len(s):
        raise ValueError(f"trailing characters at offset {pos}: {s[pos:pos + 12]!r}")
    return ActionCommand(**values)


def action_to_tokens(a: ActionCommand) -> tuple[int, ...]:
    t = a.as_tuple()
    return tuple(
        v + (TRANSLATION_BOUND if k < 3 else ROTATION_BOUND if k < 6 else 0)
        for k, v in enumerate(t)
    )


def tokens_to_action(tokens: Sequence[int]) -> ActionCommand:
    if len(tokens) != 7:
        raise ValueError("need exactly 7 tokens")
    for k, (tok, size) in enumerate(zip(tokens, HEAD_SIZES)):
        if not 0 <= tok < size:
            raise ValueError(f"token {tok} at position {k} outside [0, {size})")
    vals = [
        int(tok) - (TRANSLATION_BOUND if k < 3 else ROTATION_BOUND if k < 6 else 0)
        for k, tok in enumerate(tokens)
    ]
    return ActionCommand(*vals)


@dataclass(frozen=True)
class ActionTokens:
    """Seven token indices with the chosen-token log-probability snapshot."""

    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    policy_version: int

    def __post_init__(self):
        if len(self.tokens) != 7 or len(self.logprobs) != 7:
            raise ValueError("need 7 tokens and 7 logprobs")
        for k, (tok, size) in enumerate(zip(self.tokens, HEAD_SIZES)):
            if not 0 <= tok < size:
                raise ValueError(f"token {tok} at position {k} outside [0, {size})")

    @property
    def logprob_sum(self) -> float:
        return float(sum(self.logprobs))


def _action_vector(a: Optional[ActionCommand]) -> np.ndarray:
    if a is None:
        return np.zeros(_ACTION_VEC_LEN)
    t = a.as_tuple()
    return np.array(
        [
            t[0] / TRANSLATION_BOUND,
            t[1] / TRANSLATION_BOUND,
            t[2] / TRANSLATION_BOUND,
            t[3] / ROTATION_BOUND,
            t[4] / ROTATION_BOUND,
            t[5] / ROTATION_BOUND,
            float(t[6]),
        ]
    )


@dataclass(frozen=True)
class PolicyInput:
    """Observation features, task one-hot, and the last H actions (zero-padded)."""

    features: np.ndarray
    task_vector: np.ndarray
    history: tuple[Optional[ActionCommand], ...] = (None,) * HISTORY_LEN

    def __post_init__(self):
        if len(self.history) != HISTORY_LEN:
            raise ValueError(f"history must hold exactly {HISTORY_LEN} entries")

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.features, self.task_vector] + [_action_vector(a) for a in self.history]
        )


def input_length(feature_len: int, task_vocab_size: int) -> int:
    return feature_len + task_vocab_size + HISTORY_LEN * _ACTION_VEC_LEN


class _PolicyNet(nn.Module):
    def __init__(self, input_len: int, hidden: int):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Linear(input_len, hidden),
            nn.Tanh(),
            nn.Linear(hidden, hidden),
            nn.Tanh(),
        )
        self.heads = nn.ModuleList(nn.Linear(hidden, size) for size in HEAD_SIZES)
        self.value = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        h = self.trunk(x)
        return [head(h) for head in self.heads], self.value(h).squeeze(-1)


class PolicyModel:
    """Immutable parameter snapshot; every update yields a new version."""

    def __init__(self, net: _PolicyNet, input_len: int, hidden: int, version: int):
        self.net = net
        self.input_len = input_len
        self.hidden = hidden
        self.version = version
        self.net.eval()

    def clone_net(self) -> _PolicyNet:
        return copy.deepcopy(self.net)


def new_policy(input_len: int, hidden: int = 128, seed: int = 0) -> PolicyModel:
    torch.manual_seed(seed)
    net = _PolicyNet(input_len, hidden).double()
    return PolicyModel(net, input_len, hidden, version=1)


def _as_tensor(inputs: Sequence[PolicyInput]) -> torch.Tensor:
    return torch.tensor(np.stack([i.vector() for i in inputs]), dtype=torch.float64)


def sample_action(
    model: PolicyModel,
    input: PolicyInput,
    rng_seed: int,
    temperature: float = 1.0,
) -> tuple[ActionCommand, ActionTokens, float, float]:
    """Draw one action; returns (command, tokens, value, logprob_sum).

    Temperature shapes exploration only; the recorded log-probabilities are
    always the temperature-1 policy's, which is what the trainer recomputes.
    Temperature <= 0 means greedy argmax.
    """
    rng = np.random.default_rng(rng_seed)
    with torch.no_grad():
        logits_per_head, value = model.net(_as_tensor([input]))
    tokens = []
    logprobs = []
    for logits in logits_per_head:
        logits = logits[0]
        logp = torch.log_softmax(logits, dim=-1)
        if temperature <= 0.0:
            tok = int(torch.argmax(logits).item())
        else:
            probs = torch.softmax(logits / temperature, dim=-1).numpy()
            tok = int(rng.choice(len(probs), p=probs / probs.sum()))
        tokens.append(tok)
        logprobs.append(float(logp[tok].item()))
    at = ActionTokens(tuple(tokens), tuple(logprobs), model.version)
    return tokens_to_action(tokens), at, float(value.item()), at.logprob_sum


def logprob_of(model: PolicyModel, input: PolicyInput, tokens: ActionTokens) -> float:
    """Log-probability of the token sequence under the current parameters."""
    with torch.no_grad():
        lp, _, _ = batched_logprobs(model.net, _as_tensor([input]), [tokens.tokens])
    return float(lp[0].item())


def batched_logprobs(
    net: _PolicyNet, x: torch.Tensor, token_rows: Sequence[Sequence[int]]
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(logprob_sum, entropy, value) per row; differentiable."""
    logits_per_head, value = net(x)
    toks = torch.tensor(np.asarray(token_rows, dtype=np.int64))
    total_lp = torch.zeros(x.shape[0], dtype=torch.float64)
    total_ent = torch.zeros(x.shape[0], dtype=torch.float64)
    for k, logits in enumerate(logits_per_head):
        logp = torch.log_softmax(logits, dim=-1)
        total_lp = total_lp + logp.gather(1, toks[:, k : k + 1]).squeeze(1)
        total_ent = total_ent - (logp.exp() * logp).sum(dim=-1)
    return total_lp, total_ent, value


def values_of(model: PolicyModel, inputs: Sequence[PolicyInput]) -> np.ndarray:
    with torch.no_grad():
        _, value = model.net(_as_tensor(inputs))
    return value.numpy()


def nll_update(
    model: PolicyModel,
    demos: Sequence[tuple[PolicyInput, ActionTokens]],
    learning_rate: float,
) -> PolicyModel:
    """One gradient step on mean NLL over the demo batch; new version.

    The value head receives no gradient here (demos carry no return target).
    """
    if not demos:
        raise ValueError("demo batch is empty")
    net = model.clone_net()
    net.train()
    x = _as_tensor([d[0] for d in demos])
    rows = [d[1].tokens for d in demos]
    lp, _, _ = batched_logprobs(net, x, rows)
    loss = -lp.mean()
    loss.backward()
    with torch.no_grad():
        for name, p in net.named_parameters():
            if p.grad is not None and not name.startswith("value."):
                p -= learning_rate * p.grad
    net.zero_grad()
    return PolicyModel(net, model.input_len, model.hidden, model.version + 1)


def nll_of(model: PolicyModel, demos: Sequence[tuple[PolicyInput, ActionTokens]]) -> float:
    x = _as_tensor([d[0] for d in demos])
    with torch.no_grad():
        lp, _, _ = batched_logprobs(model.net, x, [d[1].tokens for d in demos])
    return float(-lp.mean().item())


def behavior_clone(
    model: PolicyModel,
    demos: Sequence[tuple[PolicyInput, ActionTokens]],
    steps: int,
    learning_rate: float = 0.05,
    batch_size: int = 128,
    seed: int = 0,
) -> PolicyModel:
    """Repeated NLL steps over minibatches of the demo set."""
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.choice(len(demos), size=min(batch_size, len(demos)), replace=False)
        model = nll_update(model, [demos[i] for i in idx], learning_rate)
    return model


# --- checkpoints -------------------------------------------------------------


def save_policy(model: PolicyModel, path, extra: Optional[dict] = None) -> None:
    import json

    state = model.net.state_dict()
    header = {
        "version": model.version,
        "input_len": model.input_len,
        "hidden": model.hidden,
        "tensors": [[k, list(v.shape)] for k, v in state.items()],
        **(extra or {}),
    }
    blob = b"".join(state[k].numpy().astype(np.float64).tobytes() for k, _ in header["tensors"])
    with open(path, "wb") as fh:
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(len(head).to_bytes(4, "big"))
        fh.write(head)
        fh.write(blob)


def load_policy(path) -> PolicyModel:
    import json

    with open(path, "rb") as fh:
        head_len = int.from_bytes(fh.read(4), "big")
        header = json.loads(fh.read(head_len).decode("utf-8"))
        blob = fh.read()
    net = _PolicyNet(header["input_len"], header["hidden"]).double()
    state = {}
    offset = 0
    for key, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=np.float64, count=count, offset=offset).reshape(shape)
        state[key] = torch.tensor(arr, dtype=torch.float64)
        offset += count * 8
    net.load_state_dict(state)
    return PolicyModel(net, header["input_len"], header["hidden"], header["version"])
