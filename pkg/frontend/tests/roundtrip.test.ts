/**
 * Round-trip tests against a live serve instance: the console drives the
 * real message channel end to end (pause ack, failure-state reset, teleop
 * demo recording), exactly as the UI event handlers would.
 */

import { ChildProcess, spawn } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ConsoleController } from "../src/console.js";
import { connectTcp } from "../src/tcp.js";

const PORT = 18000 + Math.floor(Math.random() * 10_000);
let server: ChildProcess;

function waitForServer(proc: ChildProcess): Promise<void> {
  return new Promise((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("serve did not start")), 20_000);
    proc.stdout?.on("data", (chunk: Buffer) => {
      if (chunk.toString().includes("serving")) {
        clearTimeout(timer);
        resolve();
      }
    });
    proc.on("exit", (code) => reject(new Error(`serve exited early (${code})`)));
  });
}

beforeAll(async () => {
  server = spawn(
    "python3",
    ["-u", "-m", "fleetrl.cli", "serve", "--port", String(PORT), "--robots", "2"],
    {
    stdio: ["ignore", "pipe", "inherit"],
  });
  await waitForServer(server);
}, 30_000);

afterAll(() => {
  server?.kill();
});

async function newConsole(): Promise<ConsoleController> {
  const controller = new ConsoleController(await connectTcp("127.0.0.1", PORT, 20));
  await controller.connect();
  return controller;
}

describe("console round trip", () => {
  it("receives the fleet on hello", async () => {
    const console1 = await newConsole();
    expect(console1.state.fleet.length).toBeGreaterThan(0);
    expect(console1.state.task.length).toBeGreaterThan(0);
    const robot = console1.state.fleet[0];
    expect(robot.raster.length).toBeGreaterThan(0);
    console1.close();
  });

  it("reflects a pause ack and the paused flag", async () => {
    const ui = await newConsole();
    const robotId = ui.state.fleet[0].robot_id;
    const ok = await ui.pause(robotId);
    expect(ok).toBe(true);
    expect(ui.state.lastAck()?.ok).toBe(true);
    expect(ui.state.robot(robotId)?.paused).toBe(true);
    await ui.resume(robotId);
    expect(ui.state.robot(robotId)?.paused).toBe(false);
    ui.close();
  });

  it("rejects a reset while unpaused, performs it once paused", async () => {
    const ui = await newConsole();
    const robotId = ui.state.fleet[0].robot_id;
    await ui.refreshFailures();
    expect(ui.state.failures.length).toBeGreaterThan(0);
    const failure = ui.state.failures.find((f) => f.robot_id === robotId) ?? ui.state.failures[0];

    expect(await ui.resetToFailureState(robotId, failure.episode_id)).toBe(false);
    expect(ui.state.lastAck()?.message).toContain("pause");

    await ui.pause(robotId);
    expect(await ui.resetToFailureState(robotId, failure.episode_id)).toBe(true);
    await ui.resume(robotId);
    ui.close();
  });

  it("records a 20-step teleop session as a 20-step demo", async () => {
    const ui = await newConsole();
    const robotId = ui.state.fleet[1].robot_id;
    await ui.refreshBuffer();
    const demosBefore = ui.state.buffer.demos;
    const stepsBefore = ui.state.buffer.total_steps;

    await ui.pause(robotId);
    expect(await ui.startTeleop(robotId)).toBe(true);
    expect(ui.state.robot(robotId)?.teleop).toBe(true);

    const keys = ["+x", "+x", "+y", "-z", "gripper"];
    for (let step = 0; step < 20; step++) {
      expect(await ui.teleopKey(robotId, keys[step % keys.length])).toBe(true);
    }
    expect(await ui.stopTeleop(robotId)).toBe(true);

    expect(ui.state.buffer.demos).toBe(demosBefore + 1);
    expect(ui.state.buffer.total_steps).toBe(stepsBefore + 20);
    await ui.resume(robotId);
    ui.close();
  });

  it("keyboard teleop without a session is refused", async () => {
    const ui = await newConsole();
    const robotId = ui.state.fleet[0].robot_id;
    expect(await ui.teleopKey(robotId, "+x")).toBe(false);
    ui.close();
  });
});
