"""Network endpoint for the operator console.

Speaks the length-prefixed Envelope protocol over TCP.  The protocol logic
lives in ServeSession (pure request -> replies, no sockets) so it is testable
without a running server; serve_forever wraps it in asyncio.
"""

from __future__ import annotations

import asyncio
from dataclasses import dataclass, field

from .hil import (
    HilService,
    InterventionCommand,
    InterventionKind,
    teleop_key_to_action,
)
from .orchestrator import Envelope, FrameError, MsgType, decode_envelope, encode_envelope
from .policy import ActionTokens, action_to_tokens
from .rollout import HistoryBuffer, make_input, task_vector
from .sim import RobotProfile, TaskSpec, World, fleet_profiles, oracle_progress, reset as _fresh_state


@dataclass
class RobotRuntime:
    """One simulated robot the console can watch and teleoperate."""

    world: World
    history: HistoryBuffer = field(default_factory=HistoryBuffer)
    gripper_open: int = 1
    last_obs: object = None


class ServeApp:
    """Shared server state: the HIL service plus the simulated fleet."""

    def __init__(self, spec: TaskSpec, n_robots: int = 2, seed: int = 0):
        self.spec = spec
        self.hil = HilService()
        self.robots: dict[str, RobotRuntime] = {}
        self._task_vec = task_vector(spec.task_text, [spec.task_text])
        profiles = fleet_profiles(n_robots, seed) if n_robots > 1 else [RobotProfile()]
        for k, profile in enumerate(profiles):
            world = World(spec, profile)
            rt = RobotRuntime(world=world)
            rt.last_obs = world.reset(seed=seed * 101 + k)
            self.robots[profile.robot_id] = rt
            self.hil.register_robot(profile.robot_id)
        # seed the failure log with a few fresh reset states so the console's
        # reset picker has entries before any training run has logged failures
        for k, robot_id in enumerate(self.robots):
            state, _ = _fresh_state(spec, seed=900 + k)
            self.hil.failure_log.record_episode(
                state, final_progress=0.0, done=0, robot_id=robot_id, episode_id=f"seed-{900 + k}"
            )

    def fleet_snapshot(self) -> list[dict]:
        out = []
        for robot_id, rt in self.robots.items():
            state = rt.world.state
            out.append(
                {
                    "robot_id": robot_id,
                    "paused": self.hil.is_paused(robot_id),
                    "teleop": self.hil.teleop_session(robot_id) is not None,
                    "eef": list(map(float, state.eef[:3])),
                    "gripper_open": rt.gripper_open,
                    "progress": oracle_progress(state, self.spec),
                    "raster": rt.last_obs.raster.round(3).tolist(),
                    "timestamp_ms": state.timestamp_ms,
                }
            )
        return out

    def failure_states(self) -> list[dict]:
        return [
            {
                "episode_id": rec.episode_id,
                "robot_id": rec.robot_id,
                "progress": rec.progress,
            }
            for rec in self.hil.failure_log.records()
        ]


class ServeSession:
    """One console connection multiplexed onto the shared app state."""

    def __init__(self, app: ServeApp):
        self.app = app
        self._seq = 0

    def _reply(self, req: Envelope, msg_type: MsgType, payload: dict) -> Envelope:
        self._seq += 1
        return Envelope(msg_type, req.robot_id, self._seq, req.timestamp_ms, payload)

    def handle(self, env: Envelope) -> list[Envelope]:
        if env.msg_type is MsgType.HELLO:
            return [
                self._reply(
                    env,
                    MsgType.ACK,
                    {"ok": True, "fleet": self.app.fleet_snapshot(), "task": self.app.spec.task_text},
                )
            ]
        if env.msg_type is MsgType.METRIC:
            return [self._reply(env, MsgType.METRIC, self._metric_payload(env.payload))]
        if env.msg_type is MsgType.INTERVENE:
            return [self._handle_intervene(env)]
        return [
            self._reply(env, MsgType.ACK, {"ok": False, "message": f"unsupported {env.msg_type.value}"})
        ]

    def _metric_payload(self, query: dict) -> dict:
        what = query.get("what", "fleet")
        if what == "fleet":
            return {"fleet": self.app.fleet_snapshot()}
        if what == "failures":
            return {"failures": self.app.failure_states()}
        if what == "buffer":
            buf = self.app.hil.demo_buffer
            return {"demos": len(buf), "total_steps": buf.total_steps}
        return {"error": f"unknown metric {what!r}"}

    def _handle_intervene(self, env: Envelope) -> Envelope:
        payload = env.payload
        kind_name = payload.get("kind", "")
        if kind_name == "teleop_key":
            return self._teleop_step(env)
        try:
            kind = InterventionKind(kind_name)
        except ValueError:
            return self._reply(env, MsgType.ACK, {"ok": False, "message": f"unknown kind {kind_name!r}"})
        snapshot = None
        if kind is InterventionKind.RESET_TO_STATE:
            snapshot = self._lookup_failure_state(payload.get("failure_episode_id"))
            if snapshot is None:
                return self._reply(env, MsgType.ACK, {"ok": False, "message": "unknown failure episode"})
        cmd = InterventionCommand(
            kind=kind,
            robot_id=env.robot_id,
            operator_id=payload.get("operator_id", "console"),
            timestamp_ms=env.timestamp_ms,
            state_snapshot=snapshot,
        )
        ack = self.app.hil.handle_intervention(cmd)
        return self._reply(env, MsgType.ACK, {"ok": ack.ok, "message": ack.message})

    def _lookup_failure_state(self, episode_id):
        for rec in self.app.hil.failure_log.records():
            if rec.episode_id == episode_id:
                return rec.state
        return None

    def _teleop_step(self, env: Envelope) -> Envelope:
        robot_id = env.robot_id
        rt = self.app.robots.get(robot_id)
        if rt is None:
            return self._reply(env, MsgType.ACK, {"ok": False, "message": f"unknown robot {robot_id!r}"})
        if self.app.hil.teleop_session(robot_id) is None:
            return self._reply(env, MsgType.ACK, {"ok": False, "message": "no active teleop session"})
        try:
            action = teleop_key_to_action(env.payload.get("key", ""), rt.gripper_open)
        except ValueError as exc:
            return self._reply(env, MsgType.ACK, {"ok": False, "message": str(exc)})
        inp = make_input(rt.last_obs, self.app._task_vec, rt.history)
        tokens = ActionTokens(action_to_tokens(action), (0.0,) * 7, policy_version=0)
        self.app.hil.record_teleop_step(robot_id, inp, tokens)
        rt.history.push(action)
        rt.last_obs, _ = rt.world.step(action)
        rt.gripper_open = action.open
        return self._reply(
            env,
            MsgType.ACK,
            {
                "ok": True,
                "message": "teleop step recorded",
                "eef": list(map(float, rt.world.state.eef[:3])),
                "progress": oracle_progress(rt.world.state, self.app.spec),
            },
        )


async def _handle_connection(app: ServeApp, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
    session = ServeSession(app)
    buf = b""
    try:
        while True:
            chunk = await reader.read(65536)
            if not chunk:
                break
            buf += chunk
            while len(buf) >= 4 and len(buf) >= 4 + int.from_bytes(buf[:4], "big"):
                try:
                    env, consumed = decode_envelope(buf)
                except FrameError:
                    return  # corrupt frame: drop the connection
                buf = buf[consumed:]
                for reply in session.handle(env):
                    writer.write(encode_envelope(reply))
            await writer.drain()
    finally:
        writer.close()


async def start_server(app: ServeApp, host: str = "127.0.0.1", port: int = 8765):
    return await asyncio.start_server(lambda r, w: _handle_connection(app, r, w), host, port)


async def serve_forever(
    spec: TaskSpec,
    host: str = "127.0.0.1",
    port: int = 8765,
    n_robots: int = 2,
    seed: int = 0,
) -> None:
    app = ServeApp(spec, n_robots=n_robots, seed=seed)
    server = await start_server(app, host, port)
    async with server:
        await server.serve_forever()
