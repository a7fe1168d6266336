/**
 * Node TCP transport for the console channel: used by the test driver and
 * the desktop/electron wrapper. Browser builds plug a different Channel in;
 * the protocol bytes are identical either way.
 */

import * as net from "node:net";

import { Channel } from "./client.js";

export function connectTcp(host: string, port: number, retries = 0): Promise<Channel> {
  return new Promise((resolve, reject) => {
    const socket = net.createConnection({ host, port });
    socket.once("error", (err) => {
      if (retries > 0) {
        setTimeout(() => connectTcp(host, port, retries - 1).then(resolve, reject), 250);
      } else {
        reject(err);
      }
    });
    socket.once("connect", () => {
      resolve({
        send: (data) => socket.write(data),
        onData: (handler) => socket.on("data", (chunk) => handler(new Uint8Array(chunk))),
        close: () => socket.destroy(),
      });
    });
  });
}
