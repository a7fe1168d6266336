"""Serve endpoint: session semantics and a live TCP round trip."""

import asyncio

import pytest

from fleetrl.orchestrator import Envelope, MsgType, decode_envelope, encode_envelope
from fleetrl.serve import ServeApp, ServeSession, start_server
from fleetrl.sim import TaskId, default_task_spec


@pytest.fixture()
def app():
    return ServeApp(default_task_spec(TaskId.PICK_PLACE), n_robots=2, seed=0)


@pytest.fixture()
def session(app):
    return ServeSession(app)


def _send(session, msg_type, robot_id, payload, ts=0):
    (reply,) = session.handle(Envelope(msg_type, robot_id, 1, ts, payload))
    return reply


class TestSession:
    def test_hello_returns_fleet(self, session):
        reply = _send(session, MsgType.HELLO, "console", {})
        assert reply.msg_type is MsgType.ACK
        fleet = reply.payload["fleet"]
        assert {r["robot_id"] for r in fleet} == {"robot-0", "robot-1"}
        assert all(not r["paused"] for r in fleet)
        assert reply.payload["task"]

    def test_pause_reflected_in_snapshot(self, session):
        reply = _send(session, MsgType.INTERVENE, "robot-0", {"kind": "pause"})
        assert reply.payload["ok"]
        fleet = _send(session, MsgType.METRIC, "console", {"what": "fleet"}).payload["fleet"]
        paused = {r["robot_id"]: r["paused"] for r in fleet}
        assert paused == {"robot-0": True, "robot-1": False}

    def test_reset_requires_pause(self, session, app):
        failures = _send(session, MsgType.METRIC, "console", {"what": "failures"}).payload["failures"]
        assert failures, "reset picker should have pre-seeded entries"
        eid = failures[0]["episode_id"]
        denied = _send(
            session, MsgType.INTERVENE, "robot-0",
            {"kind": "reset_to_state", "failure_episode_id": eid},
        )
        assert not denied.payload["ok"]
        _send(session, MsgType.INTERVENE, "robot-0", {"kind": "pause"})
        ok = _send(
            session, MsgType.INTERVENE, "robot-0",
            {"kind": "reset_to_state", "failure_episode_id": eid},
        )
        assert ok.payload["ok"]
        assert app.hil.take_pending_reset("robot-0") is not None

    def test_reset_unknown_episode(self, session):
        _send(session, MsgType.INTERVENE, "robot-0", {"kind": "pause"})
        reply = _send(
            session, MsgType.INTERVENE, "robot-0",
            {"kind": "reset_to_state", "failure_episode_id": "nope"},
        )
        assert not reply.payload["ok"]

    def test_teleop_records_demo(self, session):
        _send(session, MsgType.INTERVENE, "robot-0", {"kind": "pause"})
        assert _send(session, MsgType.INTERVENE, "robot-0", {"kind": "start_teleop"}).payload["ok"]
        keys = ["+x", "-y", "+z", "gripper"] * 5
        for key in keys:
            step = _send(session, MsgType.INTERVENE, "robot-0", {"kind": "teleop_key", "key": key})
            assert step.payload["ok"], step.payload
            assert "eef" in step.payload
        assert _send(session, MsgType.INTERVENE, "robot-0", {"kind": "stop_teleop"}).payload["ok"]
        buf = _send(session, MsgType.METRIC, "console", {"what": "buffer"}).payload
        assert buf == {"demos": 1, "total_steps": 20}

    def test_teleop_requires_session(self, session):
        reply = _send(session, MsgType.INTERVENE, "robot-0", {"kind": "teleop_key", "key": "+x"})
        assert not reply.payload["ok"]

    def test_unknown_kind_and_unknown_robot(self, session):
        assert not _send(session, MsgType.INTERVENE, "robot-0", {"kind": "levitate"}).payload["ok"]
        assert not _send(session, MsgType.INTERVENE, "robot-9", {"kind": "pause"}).payload["ok"]

    def test_sessions_share_app_state(self, app):
        a, b = ServeSession(app), ServeSession(app)
        _send(a, MsgType.INTERVENE, "robot-1", {"kind": "pause"})
        fleet = _send(b, MsgType.METRIC, "console", {"what": "fleet"}).payload["fleet"]
        assert any(r["robot_id"] == "robot-1" and r["paused"] for r in fleet)


class TestTcpRoundTrip:
    def test_hello_and_pause_over_socket(self, app):
        async def scenario():
            server = await start_server(app, "127.0.0.1", 0)
            port = server.sockets[0].getsockname()[1]
            reader, writer = await asyncio.open_connection("127.0.0.1", port)

            async def rpc(env):
                writer.write(encode_envelope(env))
                await writer.drain()
                head = await reader.readexactly(4)
                body = await reader.readexactly(int.from_bytes(head, "big"))
                reply, _ = decode_envelope(head + body)
                return reply

            hello = await rpc(Envelope(MsgType.HELLO, "console", 1, 0, {}))
            pause = await rpc(Envelope(MsgType.INTERVENE, "robot-0", 2, 5, {"kind": "pause"}))
            writer.close()
            server.close()
            await server.wait_closed()
            return hello, pause

        hello, pause = asyncio.run(scenario())
        assert hello.msg_type is MsgType.ACK and len(hello.payload["fleet"]) == 2
        assert pause.payload == {"ok": True, "message": "paused"}
        assert app.hil.is_paused("robot-0")
