/**
 * High-level console operations: each one issues the command, waits for the
 * service's answer, and refreshes the affected view so the store reflects
 * the service's state rather than the console's intent.
 */

import { Channel, ConsoleClient } from "./client.js";
import { ConsoleState } from "./state.js";

export class ConsoleController {
  readonly client: ConsoleClient;
  readonly state = new ConsoleState();

  constructor(channel: Channel) {
    this.client = new ConsoleClient(channel);
    this.client.onEnvelope((env) => this.state.apply(env));
  }

  async connect(): Promise<void> {
    await this.client.hello();
  }

  async refreshFleet(): Promise<void> {
    await this.client.metric("fleet");
  }

  async refreshFailures(): Promise<void> {
    await this.client.metric("failures");
  }

  async refreshBuffer(): Promise<void> {
    await this.client.metric("buffer");
  }

  async pause(robotId: string): Promise<boolean> {
    const reply = await this.client.pause(robotId);
    await this.refreshFleet();
    return reply.payload.ok === true;
  }

  async resume(robotId: string): Promise<boolean> {
    const reply = await this.client.resume(robotId);
    await this.refreshFleet();
    return reply.payload.ok === true;
  }

  /** Reset a paused robot to one of the logged failure states. */
  async resetToFailureState(robotId: string, failureEpisodeId: string): Promise<boolean> {
    const reply = await this.client.resetToFailureState(robotId, failureEpisodeId);
    await this.refreshFleet();
    return reply.payload.ok === true;
  }

  async startTeleop(robotId: string): Promise<boolean> {
    const reply = await this.client.startTeleop(robotId);
    await this.refreshFleet();
    return reply.payload.ok === true;
  }

  /** One keyboard teleop step; the service records it into the demo draft. */
  async teleopKey(robotId: string, key: string): Promise<boolean> {
    const reply = await this.client.teleopKey(robotId, key);
    return reply.payload.ok === true;
  }

  /** End the session; the recorded steps land in the demo buffer. */
  async stopTeleop(robotId: string): Promise<boolean> {
    const reply = await this.client.stopTeleop(robotId);
    await this.refreshFleet();
    await this.refreshBuffer();
    return reply.payload.ok === true;
  }

  close(): void {
    this.client.close();
  }
}

/** Keyboard layout for teleoperation, one binding per service teleop key. */
export const KEY_BINDINGS: Record<string, string> = {
  ArrowRight: "+x",
  ArrowLeft: "-x",
  ArrowUp: "+y",
  ArrowDown: "-y",
  PageUp: "+z",
  PageDown: "-z",
  q: "+roll",
  a: "-roll",
  w: "+pitch",
  s: "-pitch",
  e: "+yaw",
  d: "-yaw",
  " ": "gripper",
};
