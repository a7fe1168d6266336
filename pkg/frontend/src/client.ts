/**
 * Console session over a persistent byte channel.
 *
 * The transport is anything that can carry bytes both ways (a TCP socket in
 * tests and in the desktop wrapper, a socket bridge in the browser); the
 * client only sees the Channel interface. Replies arrive in request order on
 * a session, so a FIFO of pending resolvers pairs them back up.
 */

import { Envelope, FrameReader, MsgType, encodeEnvelope } from "./protocol.js";

export interface Channel {
  send(data: Uint8Array): void;
  onData(handler: (chunk: Uint8Array) => void): void;
  close(): void;
}

export class ConsoleClient {
  private reader = new FrameReader();
  private pending: Array<(env: Envelope) => void> = [];
  private seq = 0;
  private listeners: Array<(env: Envelope) => void> = [];

  constructor(private channel: Channel) {
    channel.onData((chunk) => {
      for (const env of this.reader.push(chunk)) {
        const resolve = this.pending.shift();
        if (resolve) resolve(env);
        for (const listener of this.listeners) listener(env);
      }
    });
  }

  /** Every decoded envelope, after request pairing; the UI store feeds on this. */
  onEnvelope(listener: (env: Envelope) => void): void {
    this.listeners.push(listener);
  }

  request(msgType: MsgType, robotId: string, payload: Record<string, unknown>): Promise<Envelope> {
    const env: Envelope = {
      msg_type: msgType,
      robot_id: robotId,
      seq: ++this.seq,
      timestamp_ms: Date.now(),
      payload,
    };
    const reply = new Promise<Envelope>((resolve) => this.pending.push(resolve));
    this.channel.send(encodeEnvelope(env));
    return reply;
  }

  hello(): Promise<Envelope> {
    return this.request("HELLO", "console", {});
  }

  metric(what: "fleet" | "failures" | "buffer"): Promise<Envelope> {
    return this.request("METRIC", "console", { what });
  }

  intervene(robotId: string, kind: string, extra: Record<string, unknown> = {}): Promise<Envelope> {
    return this.request("INTERVENE", robotId, { kind, ...extra });
  }

  pause(robotId: string): Promise<Envelope> {
    return this.intervene(robotId, "pause");
  }

  resume(robotId: string): Promise<Envelope> {
    return this.intervene(robotId, "resume");
  }

  resetToFailureState(robotId: string, failureEpisodeId: string): Promise<Envelope> {
    return this.intervene(robotId, "reset_to_state", { failure_episode_id: failureEpisodeId });
  }

  startTeleop(robotId: string): Promise<Envelope> {
    return this.intervene(robotId, "start_teleop");
  }

  stopTeleop(robotId: string): Promise<Envelope> {
    return this.intervene(robotId, "stop_teleop");
  }

  teleopKey(robotId: string, key: string): Promise<Envelope> {
    return this.intervene(robotId, "teleop_key", { key });
  }

  close(): void {
    this.channel.close();
  }
}
