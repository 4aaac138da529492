import { describe, expect, it } from "vitest";

import { Telemetry } from "../src/protocol";
import {
  RING_CAPACITY,
  axisSeries,
  gapIndices,
  initialState,
  onServerMsg,
} from "../src/state";

function tele(t: number, over: Partial<Telemetry> = {}): Telemetry {
  return {
    type: "telemetry",
    t,
    p: [0, 0, 2],
    q: [1, 0, 0, 0],
    nu_hat: [0, 0, 0],
    nu_gt: [0, 0, 0],
    omega_z_hat: 0,
    setpoint: [0, 0, 0],
    cmd: [0, 0, 0, 0],
    activity: [0.1, 0.2, 0.3, 0.1, 0.0],
    ...over,
  };
}

describe("telemetry ring", () => {
  it("appends frames and never fabricates data", () => {
    let s = initialState();
    s = onServerMsg(s, tele(0.0), 0, null);
    s = onServerMsg(s, tele(0.05), 0, null);
    expect(s.ring.length).toBe(2);
    expect(s.ring[1].t).toBe(0.05);
  });

  it("bounds the buffer at capacity", () => {
    let s = initialState();
    for (let i = 0; i < RING_CAPACITY + 50; i++) {
      s = onServerMsg(s, tele(i * 0.05), 0, null);
    }
    expect(s.ring.length).toBe(RING_CAPACITY);
    expect(s.ring[0].t).toBeCloseTo(50 * 0.05);
  });

  it("holds at least 60 s at 20 Hz", () => {
    expect(RING_CAPACITY).toBeGreaterThanOrEqual(60 * 20);
  });

  it("clamps activity into [0, 1] before anything renders it", () => {
    let s = initialState();
    s = onServerMsg(s, tele(0, { activity: [-0.5, 1.5, 0.3] }), 0, null);
    expect(s.ring[0].activity).toEqual([0, 1, 0.3]);
  });
});

describe("setpoint acknowledgement", () => {
  it("displayed setpoint is the last server-acknowledged one", () => {
    let s = initialState();
    s = { ...s, pendingSetpoint: { nu: [0, 0.5, 0], omegaZ: 0 } };
    expect(s.ackedSetpoint.nu).toEqual([0, 0, 0]);
    s = onServerMsg(
      s,
      { type: "ack", what: "setpoint", setpoint: [0, 0.5, 0], omega_z: 0 },
      120,
      100,
    );
    expect(s.ackedSetpoint.nu).toEqual([0, 0.5, 0]);
    expect(s.pendingSetpoint).toBeNull();
    expect(s.ackLatencyMs).toBe(20);
  });

  it("reset ack clears the trajectory and records the seed", () => {
    let s = initialState();
    s = onServerMsg(s, tele(0), 0, null);
    s = onServerMsg(s, { type: "ack", what: "reset", seed: 42 }, 0, null);
    expect(s.ring).toEqual([]);
    expect(s.episodeSeed).toBe(42);
  });

  it("pause and mode acks update the flags", () => {
    let s = initialState();
    s = onServerMsg(s, { type: "ack", what: "pause", paused: true }, 0, null);
    expect(s.paused).toBe(true);
    s = onServerMsg(s, { type: "ack", what: "mode", mode: "evolved", frisbee: true }, 0, null);
    expect(s.mode).toBe("evolved");
    expect(s.frisbee).toBe(true);
  });

  it("telemetry echoes mode changes", () => {
    let s = initialState();
    s = onServerMsg(s, tele(0, { mode: "evolved" }), 0, null);
    expect(s.mode).toBe("evolved");
  });
});

describe("gap detection", () => {
  it("finds no gaps in a regular stream", () => {
    const ring = [0, 0.05, 0.1, 0.15, 0.2].map((t) => tele(t));
    expect(gapIndices(ring)).toEqual([]);
  });

  it("marks a dropped stretch", () => {
    const ring = [0, 0.05, 0.1, 0.6, 0.65, 0.7].map((t) => tele(t));
    expect(gapIndices(ring)).toEqual([2]);
  });
});

describe("series extraction", () => {
  it("pulls per-axis estimated/true/setpoint triples", () => {
    const ring = [
      tele(0, { nu_hat: [0.1, 0, 0], nu_gt: [0.12, 0, 0], setpoint: [0.2, 0, 0] }),
      tele(0.05, { nu_hat: [0.15, 0, 0], nu_gt: [0.16, 0, 0], setpoint: [0.2, 0, 0] }),
    ];
    const s = axisSeries(ring, 0);
    expect(s.est).toEqual([0.1, 0.15]);
    expect(s.gt).toEqual([0.12, 0.16]);
    expect(s.sp).toEqual([0.2, 0.2]);
  });
});
