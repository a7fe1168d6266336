"""Controller runtime: wire framing, dispatch, lag scheduling, transition store.

A single logical controller owns the dispatch state.  Rollout workers,
inference workers, the trainer, and the stores communicate only through
Envelopes; nothing here shares mutable state across actors.
"""

from __future__ import annotations

import enum
import json
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class MsgType(enum.Enum):
    HELLO = "HELLO"
    OBS = "OBS"
    ACT = "ACT"
    REWARD_Q = "REWARD_Q"
    REWARD_A = "REWARD_A"
    DONE_Q = "DONE_Q"
    DONE_A = "DONE_A"
    TRANSITION = "TRANSITION"
    INTERVENE = "INTERVENE"
    METRIC = "METRIC"
    ACK = "ACK"


@dataclass(frozen=True)
class Envelope:
    """One framed message; seq is strictly increasing per (robot_id, msg_type)."""

    msg_type: MsgType
    robot_id: str
    seq: int
    timestamp_ms: int
    payload: dict = field(default_factory=dict)


class FrameError(ValueError):
    """Codec failure; byte_offset names the first offending byte."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte {byte_offset})")
        self.byte_offset = byte_offset


_PREFIX = struct.Struct(">I")


def encode_envelope(env: Envelope) -> bytes:
    body = json.dumps(
        {
            "msg_type": env.msg_type.value,
            "robot_id": env.robot_id,
            "seq": env.seq,
            "timestamp_ms": env.timestamp_ms,
            "payload": env.payload,
        },
        separators=(",", ":"),
    ).encode("utf-8")
    return _PREFIX.pack(len(body)) + body


def decode_envelope(data: bytes) -> tuple[Envelope, int]:
    """Decode one frame from the head of data; returns (envelope, bytes consumed)."""
    if len(data) < _PREFIX.size:
        raise FrameError("truncated length prefix", len(data))
    (length,) = _PREFIX.unpack_from(data)
    end = _PREFIX.size + length
    if len(data) < end:
        raise FrameError(f"declared length {length}, {len(data) - _PREFIX.size} available", len(data))
    try:
        obj = json.loads(data[_PREFIX.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = _PREFIX.size + getattr(exc, "pos", getattr(exc, "start", 0))
        raise FrameError(f"invalid JSON body: {exc}", offset) from exc
    try:
        msg_type = MsgType(obj["msg_type"])
    except (KeyError, ValueError):
        raise FrameError(f"unknown msg_type {obj.get('msg_type')!r}", _PREFIX.size) from None
    try:
        env = Envelope(
            msg_type=msg_type,
            robot_id=obj["robot_id"],
            seq=int(obj["seq"]),
            timestamp_ms=int(obj["timestamp_ms"]),
            payload=obj.get("payload", {}),
        )
    except (KeyError, TypeError) as exc:
        raise FrameError(f"malformed envelope fields: {exc}", _PREFIX.size) from exc
    return env, end


# --- dispatch ----------------------------------------------------------------


@dataclass
class Assignment:
    worker_id: str
    envelope: Envelope
    latency_ms: int
    retries: int = 0


class DispatchState:
    """Idle-worker pool plus a FIFO of waiting observations.

    Work-conserving by construction: every path that frees a worker or adds
    an observation immediately drains the pending queue while both sides are
    non-empty.
    """

    def __init__(self):
        self.idle_workers: set[str] = set()
        self._idle_order: deque[str] = deque()
        self.pending: deque[tuple[Envelope, int, int]] = deque()  # (obs, enqueue_ms, retries)
        self.latencies_ms: list[int] = []
        self.overruns = 0

    def register_worker(self, worker_id: str, now_ms: int) -> list[Assignment]:
        if worker_id in self.idle_workers:
            return []
        self.idle_workers.add(worker_id)
        self._idle_order.append(worker_id)
        return self._drain(now_ms)

    def dispatch_observation(self, obs: Envelope, now_ms: int) -> Optional[Assignment]:
        """Assign immediately if a worker is idle, else enqueue (FIFO)."""
        if obs.msg_type is not MsgType.OBS:
            raise ValueError(f"dispatch requires OBS, got {obs.msg_type}")
        self.pending.append((obs, now_ms, 0))
        out = self._drain(now_ms)
        return out[0] if out else None

    def worker_done(self, worker_id: str, now_ms: int) -> Optional[Assignment]:
        """Worker finished its inference; give it the oldest pending OBS if any."""
        out = self.register_worker(worker_id, now_ms)
        return out[0] if out else None

    def worker_died(self, assignment: Assignment, now_ms: int) -> Optional[Assignment]:
        """Re-enqueue the orphaned OBS at the queue head with a retry tick."""
        self.pending.appendleft((assignment.envelope, now_ms, assignment.retries + 1))
        out = self._drain(now_ms)
        return out[0] if out else None

    def _drain(self, now_ms: int) -> list[Assignment]:
        out = []
        while self.pending and self._idle_order:
            obs, enqueued, retries = self.pending.popleft()
            worker = self._idle_order.popleft()
            self.idle_workers.discard(worker)
            latency = now_ms - enqueued
            self.latencies_ms.append(latency)
            out.append(Assignment(worker, obs, latency, retries))
        return out

    def p99_latency_ms(self) -> float:
        if not self.latencies_ms:
            return 0.0
        return float(np.percentile(self.latencies_ms, 99))


# --- lag scheduling ----------------------------------------------------------


@dataclass(frozen=True)
class LagSchedule:
    """Configured inference-latency budget and per-robot actuation period."""

    lag_ms: int
    period_ms: int = 200

    def __post_init__(self):
        if self.lag_ms <= 0:
            raise ValueError(f"lag_ms={self.lag_ms} must be positive")


def schedule_action_time(obs_timestamp_ms: int, lag: LagSchedule) -> int:
    return obs_timestamp_ms + lag.lag_ms


# --- transition store --------------------------------------------------------


@dataclass(frozen=True)
class StoreAck:
    stored: bool
    duplicate: bool
    episode_closed: Optional[tuple[str, int]] = None  # (episode id, length)


class TransitionStore:
    """Episode-indexed append-only store with idempotent (robot_id, seq) writes."""

    def __init__(self, capacity: int = 1_000_000):
        self.capacity = capacity
        self._by_key: dict[tuple[str, int], object] = {}
        self._episodes: dict[str, list] = {}
        self._open_episode: dict[str, str] = {}
        self._episode_counter = 0

    def __len__(self) -> int:
        return len(self._by_key)

    def submit_transition(self, robot_id: str, seq: int, transition) -> StoreAck:
        key = (robot_id, seq)
        if key in self._by_key:
            return StoreAck(stored=False, duplicate=True)
        if len(self._by_key) >= self.capacity:
            raise OverflowError("transition store full")
        self._by_key[key] = transition
        if robot_id not in self._open_episode:
            self._episode_counter += 1
            eid = f"ep-{self._episode_counter}"
            self._open_episode[robot_id] = eid
            self._episodes[eid] = []
        eid = self._open_episode[robot_id]
        self._episodes[eid].append(transition)
        if getattr(transition, "done", 0):
            del self._open_episode[robot_id]
            return StoreAck(stored=True, duplicate=False, episode_closed=(eid, len(self._episodes[eid])))
        return StoreAck(stored=True, duplicate=False)

    def read_back(self, robot_id: str, seq: int):
        return self._by_key[(robot_id, seq)]

    def episode(self, episode_id: str) -> list:
        return list(self._episodes[episode_id])


# --- load-test harness -------------------------------------------------------


def run_load_test(
    n_robots: int = 8,
    n_workers: int = 2,
    n_observations: int = 10_000,
    utilization: float = 0.8,
    inference_mean_ms: float = 20.0,
    inference_jitter_ms: float = 5.0,
    seed: int = 0,
) -> dict:
    """Closed-loop load test of the dispatcher on a simulated event clock.

    Each robot re-observes after an exponential think time once its previous
    action comes back, so arrivals are Poisson-like but at most n_robots
    observations are ever outstanding (the fleet is a closed queueing network,
    which is what keeps assignment latency bounded).  The mean think time is
    set so the offered load is `utilization` of the worker pool's capacity.
    """
    import heapq

    rng = np.random.default_rng(seed)
    state = DispatchState()
    for w in range(n_workers):
        state.register_worker(f"w{w}", 0)

    cycle_ms = n_robots * inference_mean_ms / (utilization * n_workers)
    think_mean = max(1.0, cycle_ms - inference_mean_ms)

    def service():
        return max(1.0, rng.normal(inference_mean_ms, inference_jitter_ms))

    events: list[tuple[float, int, str, str]] = []  # (time, tiebreak, kind, who)
    tick = 0
    for i in range(n_robots):
        heapq.heappush(events, (rng.exponential(think_mean), tick, "obs", f"r{i}"))
        tick += 1
    emitted = 0
    busy_ms = 0.0
    serving: dict[str, str] = {}  # worker -> robot whose OBS it is running
    seqs = {f"r{i}": 0 for i in range(n_robots)}
    violations = 0
    end_time = 0.0
    while events:
        now, _, kind, who = heapq.heappop(events)
        end_time = now
        if kind == "obs":
            if emitted >= n_observations:
                continue
            emitted += 1
            seqs[who] += 1
            a = state.dispatch_observation(Envelope(MsgType.OBS, who, seqs[who], int(now)), int(now))
            if a is not None:
                dur = service()
                busy_ms += dur
                serving[a.worker_id] = a.envelope.robot_id
                heapq.heappush(events, (now + dur, tick, "done", a.worker_id))
                tick += 1
        else:  # worker finished; its robot thinks, then re-observes
            robot = serving.pop(who)
            if emitted < n_observations:
                heapq.heappush(events, (now + rng.exponential(think_mean), tick, "obs", robot))
                tick += 1
            a = state.worker_done(who, int(now))
            if a is not None:
                dur = service()
                busy_ms += dur
                serving[a.worker_id] = a.envelope.robot_id
                heapq.heappush(events, (now + dur, tick, "done", a.worker_id))
                tick += 1
        if state.pending and state.idle_workers:
            violations += 1
    return {
        "assigned": len(state.latencies_ms),
        "p99_ms": state.p99_latency_ms(),
        "mean_ms": float(np.mean(state.latencies_ms)),
        "violations": violations,
        "utilization": busy_ms / (n_workers * end_time),
    }


def run_wall_clock_load_test(
    n_robots: int = 8,
    n_workers: int = 2,
    n_observations: int = 10_000,
    utilization: float = 0.8,
    inference_mean_ms: float = 5.0,
    inference_jitter_ms: float = 1.0,
    seed: int = 0,
) -> dict:
    """Same closed-loop fleet as run_load_test, but on real threads and time.

    Worker threads sleep for the service duration; robot threads sleep for the
    think time and then submit the next observation.  All dispatch-state
    access goes through one lock (the single-controller model), and latencies
    are measured with the monotonic wall clock.
    """
    import queue
    import threading
    import time

    rng = np.random.default_rng(seed)
    state = DispatchState()
    lock = threading.Lock()
    start = time.monotonic()

    def now_ms() -> int:
        return int((time.monotonic() - start) * 1000)

    cycle_ms = n_robots * inference_mean_ms / (utilization * n_workers)
    think_mean = max(0.1, cycle_ms - inference_mean_ms)
    # pre-drawn per-robot randomness keeps the draws deterministic under threading
    thinks = rng.exponential(think_mean, size=n_observations + n_robots) / 1000.0
    services = np.maximum(
        0.0005, rng.normal(inference_mean_ms, inference_jitter_ms, size=n_observations) / 1000.0
    )

    work: queue.Queue = queue.Queue()
    acts: dict[str, queue.Queue] = {f"r{i}": queue.Queue() for i in range(n_robots)}
    emitted = 0
    violations = 0

    def submit(robot_id: str, seq: int) -> None:
        nonlocal emitted, violations
        with lock:
            if emitted >= n_observations:
                acts[robot_id].put(None)
                return
            emitted += 1
            t = now_ms()
            a = state.dispatch_observation(Envelope(MsgType.OBS, robot_id, seq, t), t)
            if state.pending and state.idle_workers:
                violations += 1
        if a is not None:
            work.put(a)

    def worker(worker_id: str) -> None:
        with lock:
            state.register_worker(worker_id, now_ms())
        while True:
            a = work.get()
            if a is None:
                return
            time.sleep(services[(a.envelope.seq * 7919 + hash(a.envelope.robot_id)) % len(services)])
            acts[a.envelope.robot_id].put(a)
            with lock:
                nxt = state.worker_done(worker_id, now_ms())
                if state.pending and state.idle_workers:
                    violations += 1
            if nxt is not None:
                work.put(nxt)

    def robot(k: int) -> None:
        robot_id = f"r{k}"
        for seq in range(1, n_observations + 1):
            time.sleep(thinks[(seq * n_robots + k) % len(thinks)])
            submit(robot_id, seq)
            if acts[robot_id].get() is None:
                return

    workers = [threading.Thread(target=worker, args=(f"w{w}",)) for w in range(n_workers)]
    robots = [threading.Thread(target=robot, args=(k,)) for k in range(n_robots)]
    for t in workers + robots:
        t.start()
    for t in robots:
        t.join()
    for _ in workers:
        work.put(None)
    for t in workers:
        t.join()
    return {
        "assigned": len(state.latencies_ms),
        "p99_ms": state.p99_latency_ms(),
        "mean_ms": float(np.mean(state.latencies_ms)),
        "violations": violations,
        "wall_s": time.monotonic() - start,
    }


def simulate_lag_pipeline(
    lag: LagSchedule, steps: int = 100, inference_ms: Optional[int] = None
) -> dict:
    """Saturated one-robot pipeline on the simulated clock.

    The robot observes as each action starts executing; the next action is
    scheduled lag_ms after that observation, so with lag <= period it is
    already waiting when the previous action finishes.  Idle time is any gap
    between an action finishing and the next starting; an overrun is inference
    exceeding the lag budget (the action then executes as soon as it arrives).
    """
    if inference_ms is None:
        inference_ms = lag.lag_ms
    idle_ms = 0
    overruns = 0
    prev_act_end = None
    obs_t = 0
    for _ in range(steps):
        scheduled = schedule_action_time(obs_t, lag)
        arrival = obs_t + inference_ms
        if arrival > scheduled:
            overruns += 1
            scheduled = arrival
        act_t = scheduled
        if prev_act_end is not None:
            gap = act_t - prev_act_end
            if gap > 0:
                idle_ms += gap
            else:
                act_t = prev_act_end  # queued until the arm frees
        prev_act_end = act_t + lag.period_ms
        obs_t = act_t  # next observation taken as the action starts executing
    return {"idle_ms": idle_ms, "overruns": overruns}
