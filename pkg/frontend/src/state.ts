/**
 * Console state store. Mutated exclusively from the message stream so the
 * view is always a function of what the service actually said, never of what
 * the console hoped a command would do.
 */

import { Envelope, FailureEntry, RobotSnapshot } from "./protocol.js";

export interface AckEntry {
  robot_id: string;
  ok: boolean;
  message: string;
}

export interface BufferStats {
  demos: number;
  total_steps: number;
}

export class ConsoleState {
  task = "";
  fleet: RobotSnapshot[] = [];
  failures: FailureEntry[] = [];
  buffer: BufferStats = { demos: 0, total_steps: 0 };
  acks: AckEntry[] = [];
  private subscribers: Array<() => void> = [];

  subscribe(fn: () => void): void {
    this.subscribers.push(fn);
  }

  robot(robotId: string): RobotSnapshot | undefined {
    return this.fleet.find((r) => r.robot_id === robotId);
  }

  lastAck(): AckEntry | undefined {
    return this.acks[this.acks.length - 1];
  }

  /** Fold one envelope from the service into the store. */
  apply(env: Envelope): void {
    const p = env.payload;
    if (env.msg_type === "ACK") {
      if (Array.isArray(p.fleet)) {
        // HELLO reply: initial fleet snapshot plus the task line
        this.fleet = p.fleet as RobotSnapshot[];
        if (typeof p.task === "string") this.task = p.task;
      }
      if (typeof p.ok === "boolean") {
        this.acks.push({
          robot_id: env.robot_id,
          ok: p.ok,
          message: typeof p.message === "string" ? p.message : "",
        });
      }
    } else if (env.msg_type === "METRIC") {
      if (Array.isArray(p.fleet)) this.fleet = p.fleet as RobotSnapshot[];
      if (Array.isArray(p.failures)) this.failures = p.failures as FailureEntry[];
      if (typeof p.demos === "number" && typeof p.total_steps === "number") {
        this.buffer = { demos: p.demos, total_steps: p.total_steps };
      }
    }
    for (const fn of this.subscribers) fn();
  }
}
