/**
 * Envelope wire protocol: length-prefixed JSON frames, identical byte layout
 * to the backend codec. A frame is a 4-byte big-endian body length followed
 * by a UTF-8 JSON object with the five envelope fields.
 */

export type MsgType =
  | "HELLO"
  | "OBS"
  | "ACT"
  | "REWARD_Q"
  | "REWARD_A"
  | "DONE_Q"
  | "DONE_A"
  | "TRANSITION"
  | "INTERVENE"
  | "METRIC"
  | "ACK";

export interface Envelope {
  msg_type: MsgType;
  robot_id: string;
  seq: number;
  timestamp_ms: number;
  payload: Record<string, unknown>;
}

export interface RobotSnapshot {
  robot_id: string;
  paused: boolean;
  teleop: boolean;
  eef: [number, number, number];
  gripper_open: number;
  progress: number;
  raster: number[][];
  timestamp_ms: number;
}

export interface FailureEntry {
  episode_id: string;
  robot_id: string;
  progress: number;
}

export class FrameDecodeError extends Error {}

export function encodeEnvelope(env: Envelope): Uint8Array {
  const body = new TextEncoder().encode(JSON.stringify(env));
  const out = new Uint8Array(4 + body.length);
  new DataView(out.buffer).setUint32(0, body.length, false);
  out.set(body, 4);
  return out;
}

/** Incremental frame splitter: feed raw socket chunks, pull whole envelopes. */
export class FrameReader {
  private buf = new Uint8Array(0);

  push(chunk: Uint8Array): Envelope[] {
    const joined = new Uint8Array(this.buf.length + chunk.length);
    joined.set(this.buf);
    joined.set(chunk, this.buf.length);
    this.buf = joined;

    const out: Envelope[] = [];
    for (;;) {
      if (this.buf.length < 4) break;
      const view = new DataView(this.buf.buffer, this.buf.byteOffset);
      const length = view.getUint32(0, false);
      if (this.buf.length < 4 + length) break;
      const body = this.buf.subarray(4, 4 + length);
      this.buf = this.buf.slice(4 + length);
      out.push(decodeBody(body));
    }
    return out;
  }
}

function decodeBody(body: Uint8Array): Envelope {
  let obj: unknown;
  try {
    obj = JSON.parse(new TextDecoder().decode(body));
  } catch (err) {
    throw new FrameDecodeError(`invalid JSON body: ${err}`);
  }
  const env = obj as Partial<Envelope>;
  if (
    typeof env !== "object" ||
    env === null ||
    typeof env.msg_type !== "string" ||
    typeof env.robot_id !== "string" ||
    typeof env.seq !== "number" ||
    typeof env.timestamp_ms !== "number"
  ) {
    throw new FrameDecodeError("malformed envelope fields");
  }
  return {
    msg_type: env.msg_type as MsgType,
    robot_id: env.robot_id,
    seq: env.seq,
    timestamp_ms: env.timestamp_ms,
    payload: (env.payload ?? {}) as Record<string, unknown>,
  };
}
