/**
 * Console wiring: WebSocket connection, preset and free-entry setpoint
 * controls, session controls, and the render loop.
 */

import {
  FRISBEE_YAW_RATE,
  PRESET_MAGNITUDES,
  modeMsg,
  parseServerMsg,
  pauseMsg,
  resetMsg,
  setpointMsg,
} from "./protocol";
import {
  SessionView,
  axisSeries,
  gapIndices,
  initialState,
  onConnect,
  onDisconnect,
  onServerMsg,
  yawSeries,
} from "./state";
import { drawActivity, drawTimeSeries, drawTrajectory } from "./plots";

let state: SessionView = initialState();
let ws: WebSocket | null = null;
let pendingSentAt: number | null = null;

const $ = (id: string) => document.getElementById(id)!;

function sendSetpoint(nu: [number, number, number], omegaZ: number) {
  if (!ws || ws.readyState !== WebSocket.OPEN) return;
  state = { ...state, pendingSetpoint: { nu, omegaZ } };
  pendingSentAt = performance.now();
  ws.send(setpointMsg(nu, omegaZ));
}

function connect() {
  const url = `ws://${location.host}/ws`;
  ws = new WebSocket(url);
  ws.onopen = () => {
    state = onConnect(state);
    setBanner("connected", false);
  };
  ws.onclose = () => {
    state = onDisconnect(state);
    setBanner("disconnected, retrying in 2 s", true);
    setTimeout(connect, 2000);
  };
  ws.onmessage = (ev) => {
    const msg = parseServerMsg(String(ev.data));
    if (!msg) return;
    state = onServerMsg(state, msg, performance.now(), pendingSentAt);
    if (msg.type === "ack" && msg.what === "setpoint") pendingSentAt = null;
  };
}

function setBanner(text: string, bad: boolean) {
  const el = $("banner");
  el.textContent = text;
  el.className = bad ? "banner bad" : "banner good";
}

function buildPresets() {
  const axes: [string, 0 | 1 | 2][] = [["x", 0], ["y", 1], ["z", 2]];
  const host = $("presets");
  for (const [name, axis] of axes) {
    const row = document.createElement("div");
    row.className = "preset-row";
    const label = document.createElement("span");
    label.textContent = `nu_${name}`;
    row.appendChild(label);
    for (const mag of PRESET_MAGNITUDES) {
      for (const sign of [1, -1]) {
        if (axis === 2 && sign > 0) continue; // no ascent presets
        const v = sign * mag;
        const btn = document.createElement("button");
        btn.textContent = (v > 0 ? "+" : "") + v.toFixed(1);
        btn.onclick = () => {
          const nu: [number, number, number] = [0, 0, 0];
          nu[axis] = v;
          sendSetpoint(nu, state.ackedSetpoint.omegaZ);
        };
        row.appendChild(btn);
      }
    }
    host.appendChild(row);
  }
  const hover = document.createElement("button");
  hover.textContent = "hover";
  hover.className = "wide";
  hover.onclick = () => sendSetpoint([0, 0, 0], 0);
  host.appendChild(hover);
}

function bindControls() {
  ($("apply") as HTMLButtonElement).onclick = () => {
    const nu: [number, number, number] = [
      parseFloat(($("sp-x") as HTMLInputElement).value) || 0,
      parseFloat(($("sp-y") as HTMLInputElement).value) || 0,
      parseFloat(($("sp-z") as HTMLInputElement).value) || 0,
    ];
    const wz = parseFloat(($("sp-wz") as HTMLInputElement).value) || 0;
    sendSetpoint(nu, wz);
  };
  ($("reset") as HTMLButtonElement).onclick = () => ws?.send(resetMsg());
  ($("pause") as HTMLButtonElement).onclick = () => ws?.send(pauseMsg());
  ($("frisbee") as HTMLButtonElement).onclick = () => {
    const turningOn = !state.frisbee;
    ws?.send(modeMsg(state.mode as "evolved" | "pi", turningOn));
    if (turningOn) sendSetpoint(state.ackedSetpoint.nu, FRISBEE_YAW_RATE);
    else sendSetpoint(state.ackedSetpoint.nu, 0);
  };
  ($("mode") as HTMLButtonElement).onclick = () => {
    const next = state.mode === "pi" ? "evolved" : "pi";
    ws?.send(modeMsg(next, state.frisbee));
  };
}

function canvasCtx(id: string): [CanvasRenderingContext2D, number, number] {
  const c = $(id) as HTMLCanvasElement;
  const ctx = c.getContext("2d")!;
  return [ctx, c.width, c.height];
}

function render() {
  const ring = state.ring;
  const gaps = gapIndices(ring);
  const axes: [string, 0 | 1 | 2][] = [["nu_x", 0], ["nu_y", 1], ["nu_z", 2]];
  for (const [name, axis] of axes) {
    const [ctx, w, h] = canvasCtx(`plot-${name}`);
    drawTimeSeries(ctx, w, h, axisSeries(ring, axis), `${name} (est/true/sp)`, gaps);
  }
  const [yctx, yw, yh] = canvasCtx("plot-yaw");
  drawTimeSeries(yctx, yw, yh, yawSeries(ring), "omega_z (est/sp)", gaps);
  const [tctx, tw, th] = canvasCtx("plot-traj");
  drawTrajectory(tctx, tw, th, ring);
  const [actx, aw, ah] = canvasCtx("plot-activity");
  drawActivity(actx, aw, ah, ring.length ? ring[ring.length - 1].activity : []);

  $("status").textContent = [
    `mode=${state.mode}`,
    state.frisbee ? "frisbee" : "",
    state.paused ? "PAUSED" : "",
    state.episodeSeed !== null ? `episode seed ${state.episodeSeed}` : "",
    state.ackLatencyMs !== null ? `setpoint ack ${state.ackLatencyMs.toFixed(0)} ms` : "",
    state.pendingSetpoint ? "setpoint pending..." : "",
    state.lastError ? `error: ${state.lastError}` : "",
  ]
    .filter(Boolean)
    .join("  |  ");
  $("sp-display").textContent =
    `setpoint (acked): nu=[${state.ackedSetpoint.nu.map((v) => v.toFixed(2)).join(", ")}] ` +
    `omega_z=${state.ackedSetpoint.omegaZ.toFixed(2)}`;
  requestAnimationFrame(render);
}

if (typeof document !== "undefined" && document.getElementById("presets")) {
  buildPresets();
  bindControls();
  connect();
  requestAnimationFrame(render);
}
