"""Human-in-the-loop service: demo replay buffer, failure log, interventions.

The service is a single actor; commands are applied between simulator steps.
Scripted intervention agents reproduce the operator behaviors so the
intervention strategies are testable without a human.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .actions import ActionCommand
from .policy import ActionTokens, PolicyInput
from .sim import WorldState


class InterventionKind(enum.Enum):
    PAUSE = "pause"
    RESUME = "resume"
    RESET_TO_STATE = "reset_to_state"
    INJECT_DEMO = "inject_demo"
    START_TELEOP = "start_teleop"
    STOP_TELEOP = "stop_teleop"


DemoSteps = Sequence[tuple[PolicyInput, ActionTokens]]


@dataclass(frozen=True)
class InterventionCommand:
    kind: InterventionKind
    robot_id: str
    operator_id: str
    timestamp_ms: int
    state_snapshot: Optional[WorldState] = None
    demo: Optional[DemoSteps] = None

    def __post_init__(self):
        if self.kind is InterventionKind.RESET_TO_STATE and self.state_snapshot is None:
            raise ValueError("reset_to_state requires a state_snapshot")
        if self.kind is InterventionKind.INJECT_DEMO and not self.demo:
            raise ValueError("inject_demo requires a demo")


@dataclass(frozen=True)
class HilAck:
    ok: bool
    message: str = ""


@dataclass(frozen=True)
class DemoEntry:
    steps: tuple[tuple[PolicyInput, ActionTokens], ...]
    provenance: str  # "offline-seed" | "guided"


class DemoBuffer:
    """Bounded FIFO of demonstrations sampled for NLL replay during PPO."""

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[DemoEntry] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def total_steps(self) -> int:
        return sum(len(e.steps) for e in self._entries)

    def append(self, steps: DemoSteps, provenance: str) -> None:
        self._entries.append(DemoEntry(tuple(steps), provenance))
        while len(self._entries) > self.capacity:
            self._entries.popleft()

    def entries(self) -> list[DemoEntry]:
        return list(self._entries)


def sample_demo_batch(
    buffer: DemoBuffer, batch_size: int, rng_seed: int
) -> list[tuple[PolicyInput, ActionTokens, str]]:
    """Uniform over step tuples across all demos; deterministic under seed."""
    if len(buffer) == 0:
        raise ValueError("demo buffer is empty")
    flat = [
        (inp, tok, e.provenance) for e in buffer.entries() for (inp, tok) in e.steps
    ]
    rng = np.random.default_rng(rng_seed)
    idx = rng.integers(0, len(flat), size=batch_size)
    return [flat[i] for i in idx]


@dataclass(frozen=True)
class FailureRecord:
    state: WorldState
    progress: float
    robot_id: str
    episode_id: str


class FailureStateLog:
    """Ring buffer of states where the policy failed, for Return-and-Explore.

    Only episodes that time out without a done signal or end below 0.5
    progress are recordable.
    """

    def __init__(self, capacity: int = 128):
        self.capacity = capacity
        self._ring: deque[FailureRecord] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._ring)

    def record_episode(
        self,
        final_state: WorldState,
        final_progress: float,
        done: int,
        robot_id: str,
        episode_id: str,
    ) -> bool:
        if done and final_progress >= 0.5:
            return False
        self._ring.append(FailureRecord(final_state, final_progress, robot_id, episode_id))
        return True

    def records(self) -> list[FailureRecord]:
        return list(self._ring)

    def lowest_quartile(self) -> list[FailureRecord]:
        recs = sorted(self._ring, key=lambda r: r.progress)
        n = max(1, len(recs) // 4)
        return recs[:n]


@dataclass
class TeleopSession:
    robot_id: str
    recorded: list[tuple[PolicyInput, ActionTokens]] = field(default_factory=list)


# key -> fixed-magnitude delta command (5mm / 5 degrees per press)
TELEOP_BINDINGS = {
    "+x": ActionCommand(dx=5),
    "-x": ActionCommand(dx=-5),
    "+y": ActionCommand(dy=5),
    "-y": ActionCommand(dy=-5),
    "+z": ActionCommand(dz=5),
    "-z": ActionCommand(dz=-5),
    "+roll": ActionCommand(droll=5),
    "-roll": ActionCommand(droll=-5),
    "+pitch": ActionCommand(dpitch=5),
    "-pitch": ActionCommand(dpitch=-5),
    "+yaw": ActionCommand(dyaw=5),
    "-yaw": ActionCommand(dyaw=-5),
}


def teleop_key_to_action(key: str, gripper_open: int) -> ActionCommand:
    if key == "gripper":
        return ActionCommand(open=1 - gripper_open)
    base = TELEOP_BINDINGS.get(key)
    if base is None:
        raise ValueError(f"unbound teleop key {key!r}")
    return ActionCommand(
        base.dx, base.dy, base.dz, base.droll, base.dpitch, base.dyaw, gripper_open
    )


class HilService:
    """Serializes all intervention commands for a fleet of robots.

    Holds only HIL state (pause flags, buffers, pending resets); the training
    loop polls it between simulator steps, so a silent service leaves a run
    bit-identical to one without it.
    """

    def __init__(self, demo_capacity: int = 256, failure_capacity: int = 128):
        self.demo_buffer = DemoBuffer(demo_capacity)
        self.failure_log = FailureStateLog(failure_capacity)
        self._robots: set[str] = set()
        self._paused: set[str] = set()
        self._pending_reset: dict[str, WorldState] = {}
        self._teleop: dict[str, TeleopSession] = {}
        self.command_log: list[InterventionCommand] = []

    def register_robot(self, robot_id: str) -> None:
        self._robots.add(robot_id)

    def is_paused(self, robot_id: str) -> bool:
        return robot_id in self._paused

    def take_pending_reset(self, robot_id: str) -> Optional[WorldState]:
        return self._pending_reset.pop(robot_id, None)

    def teleop_session(self, robot_id: str) -> Optional[TeleopSession]:
        return self._teleop.get(robot_id)

    def handle_intervention(self, cmd: InterventionCommand) -> HilAck:
        if cmd.robot_id not in self._robots:
            return HilAck(False, f"unknown robot {cmd.robot_id!r}")
        self.command_log.append(cmd)
        kind = cmd.kind
        if kind is InterventionKind.PAUSE:
            self._paused.add(cmd.robot_id)
            return HilAck(True, "paused")
        if kind is InterventionKind.RESUME:
            self._paused.discard(cmd.robot_id)
            return HilAck(True, "resumed")
        if kind is InterventionKind.RESET_TO_STATE:
            if cmd.robot_id not in self._paused:
                return HilAck(False, "pause first")
            self._pending_reset[cmd.robot_id] = cmd.state_snapshot
            return HilAck(True, "reset queued")
        if kind is InterventionKind.INJECT_DEMO:
            self.demo_buffer.append(cmd.demo, provenance="guided")
            return HilAck(True, f"demo of {len(cmd.demo)} steps buffered")
        if kind is InterventionKind.START_TELEOP:
            if cmd.robot_id in self._teleop:
                return HilAck(False, "teleop session already active")
            if cmd.robot_id not in self._paused:
                return HilAck(False, "pause first")
            self._teleop[cmd.robot_id] = TeleopSession(cmd.robot_id)
            return HilAck(True, "teleop started")
        if kind is InterventionKind.STOP_TELEOP:
            session = self._teleop.pop(cmd.robot_id, None)
            if session is None:
                return HilAck(False, "no active teleop session")
            if session.recorded:
                self.demo_buffer.append(session.recorded, provenance="guided")
            return HilAck(True, f"teleop demo of {len(session.recorded)} steps buffered")
        return HilAck(False, f"unhandled kind {kind}")

    def record_teleop_step(
        self, robot_id: str, inp: PolicyInput, tokens: ActionTokens
    ) -> None:
        session = self._teleop.get(robot_id)
        if session is None:
            raise ValueError(f"no active teleop session for {robot_id!r}")
        session.recorded.append((inp, tokens))


# --- scripted intervention agents -------------------------------------------


class ReturnAndExploreAgent:
    """Every k episodes, restart the robot from a low-progress failure state."""

    def __init__(self, service: HilService, every_k: int = 8, seed: int = 0):
        if every_k < 1:
            raise ValueError("every_k must be >= 1")
        self.service = service
        self.every_k = every_k
        self._rng = np.random.default_rng(seed)
        self._episodes = 0

    def next_reset_state(self) -> Optional[WorldState]:
        """Called once per episode start; returns an override state or None."""
        self._episodes += 1
        if self._episodes % self.every_k != 0:
            return None
        quartile = self.service.failure_log.lowest_quartile()
        if not quartile:
            return None
        pick = quartile[int(self._rng.integers(0, len(quartile)))]
        return pick.state


class GuidedExploreAgent:
    """Inject a scripted-expert demo when the rolling success rate stalls."""

    def __init__(
        self,
        service: HilService,
        stall_episodes: int = 20,
        window: int = 20,
        min_gain: float = 0.05,
    ):
        self.service = service
        self.stall_episodes = stall_episodes
        self.window = window
        self.min_gain = min_gain
        self._history: list[int] = []
        self._last_injection_at = 0

    def _rolling(self, end: int) -> float:
        lo = max(0, end - self.window)
        seg = self._history[lo:end]
        return sum(seg) / len(seg) if seg else 0.0

    def observe_episode(self, success: bool) -> bool:
        """Record an episode outcome; True when a demo injection is due."""
        self._history.append(int(success))
        n = len(self._history)
        if n - self._last_injection_at < self.stall_episodes or n < self.window:
            return False
        now = self._rolling(n)
        then = self._rolling(n - self.stall_episodes)
        if now - then < self.min_gain and now < 0.8:
            self._last_injection_at = n
            return True
        return False
