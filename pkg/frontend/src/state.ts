/**
 * Console session state: telemetry ring buffer, pending/acknowledged
 * setpoints, connection and mode flags. Pure reducer-style updates so the
 * whole thing is unit-testable without a browser.
 */

import { Ack, ErrorMsg, Hello, ServerMsg, Telemetry } from "./protocol";

export const RING_CAPACITY = 1500; // 75 s at 20 Hz
export const GAP_FACTOR = 2.5;     // frames further apart than this x median dt are gaps

export interface SessionView {
  connected: boolean;
  hello: Hello | null;
  ring: Telemetry[];           // chronological, bounded
  pendingSetpoint: { nu: [number, number, number]; omegaZ: number } | null;
  ackedSetpoint: { nu: [number, number, number]; omegaZ: number };
  mode: string;
  frisbee: boolean;
  paused: boolean;
  episodeSeed: number | null;
  lastError: string | null;
  ackLatencyMs: number | null; // last setpoint round trip
}

export function initialState(): SessionView {
  return {
    connected: false,
    hello: null,
    ring: [],
    pendingSetpoint: null,
    ackedSetpoint: { nu: [0, 0, 0], omegaZ: 0 },
    mode: "pi",
    frisbee: false,
    paused: false,
    episodeSeed: null,
    lastError: null,
    ackLatencyMs: null,
  };
}

export interface PendingMeta {
  sentAtMs: number;
}

export function onConnect(s: SessionView): SessionView {
  return { ...initialState(), connected: true };
}

export function onDisconnect(s: SessionView): SessionView {
  return { ...s, connected: false };
}

/** Apply one validated server message. `nowMs` feeds latency accounting. */
export function onServerMsg(s: SessionView, msg: ServerMsg, nowMs: number,
                            pendingSentAtMs: number | null): SessionView {
  switch (msg.type) {
    case "hello":
      return { ...s, hello: msg };
    case "error":
      return { ...s, lastError: (msg as ErrorMsg).reason };
    case "ack":
      return applyAck(s, msg as Ack, nowMs, pendingSentAtMs);
    case "telemetry":
      return applyTelemetry(s, msg as Telemetry);
  }
}

function applyAck(s: SessionView, ack: Ack, nowMs: number,
                  pendingSentAtMs: number | null): SessionView {
  const next = { ...s };
  if (ack.what === "setpoint" && ack.setpoint) {
    next.ackedSetpoint = { nu: ack.setpoint, omegaZ: ack.omega_z ?? 0 };
    next.pendingSetpoint = null;
    if (pendingSentAtMs !== null) next.ackLatencyMs = nowMs - pendingSentAtMs;
  } else if (ack.what === "reset") {
    next.ring = [];
    next.episodeSeed = ack.seed ?? null;
  } else if (ack.what === "pause") {
    next.paused = ack.paused ?? !s.paused;
  } else if (ack.what === "mode") {
    next.mode = ack.mode ?? s.mode;
    next.frisbee = ack.frisbee ?? s.frisbee;
  }
  return next;
}

function applyTelemetry(s: SessionView, t: Telemetry): SessionView {
  const ring = s.ring.length >= RING_CAPACITY ? s.ring.slice(1) : s.ring.slice();
  // activity fractions are clamped defensively before anything renders them
  const clamped: Telemetry = {
    ...t,
    activity: t.activity.map((a) => Math.min(1, Math.max(0, a))),
  };
  ring.push(clamped);
  return {
    ...s,
    ring,
    mode: t.mode ?? s.mode,
    frisbee: t.frisbee ?? s.frisbee,
    paused: t.paused ?? s.paused,
  };
}

/** Indices in the ring after which a time gap occurred (for gap markers). */
export function gapIndices(ring: Telemetry[]): number[] {
  if (ring.length < 3) return [];
  const dts: number[] = [];
  for (let i = 1; i < ring.length; i++) dts.push(ring[i].t - ring[i - 1].t);
  const sorted = [...dts].sort((a, b) => a - b);
  const median = sorted[Math.floor(sorted.length / 2)];
  const out: number[] = [];
  for (let i = 0; i < dts.length; i++) {
    if (dts[i] > GAP_FACTOR * median || dts[i] < 0) out.push(i);
  }
  return out;
}

/** Series helper: per-axis estimated/true/setpoint triples for plotting. */
export function axisSeries(ring: Telemetry[], axis: 0 | 1 | 2) {
  return {
    t: ring.map((r) => r.t),
    est: ring.map((r) => r.nu_hat[axis]),
    gt: ring.map((r) => r.nu_gt[axis]),
    sp: ring.map((r) => r.setpoint[axis]),
  };
}

export function yawSeries(ring: Telemetry[]) {
  return {
    t: ring.map((r) => r.t),
    est: ring.map((r) => r.omega_z_hat),
    gt: ring.map((r) => 0),
    sp: ring.map((r) => r.omega_z_sp ?? 0),
  };
}
