/**
 * DOM layer: renders the store into the page and forwards input events to
 * the controller. Rendering is a pure function of ConsoleState; this module
 * holds no fleet data of its own.
 *
 * The raster panel draws exactly the observation grid the policy sees (the
 * simulator's raster channel), which is the honest basis for deciding when
 * to intervene.
 */

import { ConsoleController, KEY_BINDINGS } from "./console.js";
import { RobotSnapshot } from "./protocol.js";

const CELL = 10;

export class ConsoleUi {
  private selected = "";

  constructor(
    private controller: ConsoleController,
    private root: HTMLElement,
  ) {
    controller.state.subscribe(() => this.render());
    document.addEventListener("keydown", (ev) => this.onKey(ev));
  }

  async start(pollMs = 500): Promise<void> {
    await this.controller.connect();
    await this.controller.refreshFailures();
    await this.controller.refreshBuffer();
    setInterval(() => void this.controller.refreshFleet(), pollMs);
  }

  private onKey(ev: KeyboardEvent): void {
    const key = KEY_BINDINGS[ev.key];
    const robot = this.controller.state.robot(this.selected);
    if (!key || !robot || !robot.teleop) return;
    ev.preventDefault();
    void this.controller.teleopKey(this.selected, key);
  }

  private render(): void {
    const state = this.controller.state;
    this.root.replaceChildren();

    const title = document.createElement("h1");
    title.textContent = `fleet: ${state.task}`;
    this.root.appendChild(title);

    const fleetDiv = document.createElement("div");
    fleetDiv.className = "fleet";
    for (const robot of state.fleet) fleetDiv.appendChild(this.robotCard(robot));
    this.root.appendChild(fleetDiv);

    const buffer = document.createElement("p");
    buffer.className = "buffer";
    buffer.textContent = `demo buffer: ${state.buffer.demos} demos / ${state.buffer.total_steps} steps`;
    this.root.appendChild(buffer);

    const ack = state.lastAck();
    if (ack) {
      const line = document.createElement("p");
      line.className = ack.ok ? "ack ok" : "ack error";
      line.textContent = `${ack.robot_id}: ${ack.message}`;
      this.root.appendChild(line);
    }
  }

  private robotCard(robot: RobotSnapshot): HTMLElement {
    const card = document.createElement("div");
    card.className = robot.robot_id === this.selected ? "robot selected" : "robot";
    card.addEventListener("click", () => {
      this.selected = robot.robot_id;
      this.render();
    });

    const head = document.createElement("h2");
    const flags = [robot.paused ? "paused" : "running", robot.teleop ? "teleop" : ""]
      .filter(Boolean)
      .join(", ");
    head.textContent = `${robot.robot_id} (${flags})`;
    card.appendChild(head);

    const stats = document.createElement("p");
    const [x, y, z] = robot.eef;
    stats.textContent =
      `eef ${x.toFixed(0)},${y.toFixed(0)},${z.toFixed(0)}mm · ` +
      `progress ${(robot.progress * 100).toFixed(0)}% · ` +
      `gripper ${robot.gripper_open ? "open" : "closed"}`;
    card.appendChild(stats);

    card.appendChild(this.rasterCanvas(robot.raster));
    card.appendChild(this.controls(robot));
    return card;
  }

  private rasterCanvas(raster: number[][]): HTMLCanvasElement {
    const canvas = document.createElement("canvas");
    canvas.height = raster.length * CELL;
    canvas.width = (raster[0]?.length ?? 0) * CELL;
    const ctx = canvas.getContext("2d");
    if (!ctx) return canvas;
    for (let row = 0; row < raster.length; row++) {
      for (let col = 0; col < raster[row].length; col++) {
        const v = Math.round(raster[row][col] * 255);
        ctx.fillStyle = `rgb(${v},${v},${v})`;
        ctx.fillRect(col * CELL, row * CELL, CELL, CELL);
      }
    }
    return canvas;
  }

  private controls(robot: RobotSnapshot): HTMLElement {
    const div = document.createElement("div");
    div.className = "controls";
    const id = robot.robot_id;

    div.appendChild(
      this.button(robot.paused ? "resume" : "pause", () =>
        robot.paused ? this.controller.resume(id) : this.controller.pause(id),
      ),
    );
    div.appendChild(
      this.button(robot.teleop ? "stop teleop" : "start teleop", () =>
        robot.teleop ? this.controller.stopTeleop(id) : this.controller.startTeleop(id),
      ),
    );

    const picker = document.createElement("select");
    const blank = document.createElement("option");
    blank.textContent = "reset to failure state…";
    blank.value = "";
    picker.appendChild(blank);
    for (const failure of this.controller.state.failures) {
      const opt = document.createElement("option");
      opt.value = failure.episode_id;
      opt.textContent = `${failure.episode_id} (${(failure.progress * 100).toFixed(0)}%)`;
      picker.appendChild(opt);
    }
    picker.addEventListener("change", () => {
      if (picker.value) void this.controller.resetToFailureState(id, picker.value);
    });
    div.appendChild(picker);
    return div;
  }

  private button(label: string, onClick: () => Promise<boolean>): HTMLButtonElement {
    const btn = document.createElement("button");
    btn.textContent = label;
    btn.addEventListener("click", () => void onClick());
    return btn;
  }
}
