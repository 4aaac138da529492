/**
 * Wire protocol of the flight-console session endpoint.
 *
 * Client to server: setpoint, mode, reset, pause.
 * Server to client: hello, ack, error, telemetry at ~20 Hz.
 */

export interface SetpointMsg {
  type: "setpoint";
  nu: [number, number, number];
  omega_z: number;
}

export interface ModeMsg {
  type: "mode";
  controller: "evolved" | "pi";
  frisbee: boolean;
}

export interface ResetMsg {
  type: "reset";
}

export interface PauseMsg {
  type: "pause";
}

export type ClientMsg = SetpointMsg | ModeMsg | ResetMsg | PauseMsg;

export interface Telemetry {
  type: "telemetry";
  t: number;
  p: [number, number, number];
  q: [number, number, number, number];
  nu_hat: [number, number, number];
  nu_gt: [number, number, number];
  omega_z_hat: number;
  setpoint: [number, number, number];
  omega_z_sp?: number;
  cmd: [number, number, number, number];
  activity: number[];
  mode?: string;
  frisbee?: boolean;
  paused?: boolean;
  episode?: number;
}

export interface Hello {
  type: "hello";
  config: Record<string, unknown>;
}

export interface Ack {
  type: "ack";
  what: string;
  seed?: number;
  paused?: boolean;
  mode?: string;
  frisbee?: boolean;
  setpoint?: [number, number, number];
  omega_z?: number;
}

export interface ErrorMsg {
  type: "error";
  reason: string;
}

export type ServerMsg = Telemetry | Hello | Ack | ErrorMsg;

function isNumArray(v: unknown, n: number): v is number[] {
  return Array.isArray(v) && v.length === n && v.every((x) => typeof x === "number" && isFinite(x));
}

/** Parse and validate one server frame; returns null for garbage. */
export function parseServerMsg(raw: string): ServerMsg | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof data !== "object" || data === null) return null;
  const msg = data as Record<string, unknown>;
  switch (msg.type) {
    case "hello":
      return typeof msg.config === "object" && msg.config !== null ? (msg as unknown as Hello) : null;
    case "ack":
      return typeof msg.what === "string" ? (msg as unknown as Ack) : null;
    case "error":
      return typeof msg.reason === "string" ? (msg as unknown as ErrorMsg) : null;
    case "telemetry": {
      if (
        typeof msg.t !== "number" ||
        !isNumArray(msg.p, 3) ||
        !isNumArray(msg.q, 4) ||
        !isNumArray(msg.nu_hat, 3) ||
        !isNumArray(msg.nu_gt, 3) ||
        typeof msg.omega_z_hat !== "number" ||
        !isNumArray(msg.setpoint, 3) ||
        !isNumArray(msg.cmd, 4) ||
        !Array.isArray(msg.activity)
      ) {
        return null;
      }
      return msg as unknown as Telemetry;
    }
    default:
      return null;
  }
}

export function setpointMsg(nu: [number, number, number], omegaZ: number): string {
  return JSON.stringify({ type: "setpoint", nu, omega_z: omegaZ });
}

export function modeMsg(controller: "evolved" | "pi", frisbee: boolean): string {
  return JSON.stringify({ type: "mode", controller, frisbee });
}

export function resetMsg(): string {
  return JSON.stringify({ type: "reset" });
}

export function pauseMsg(): string {
  return JSON.stringify({ type: "pause" });
}

/** The flight-test preset magnitudes, per axis (z descending only). */
export const PRESET_MAGNITUDES = [0.2, 0.5, 1.0] as const;
export const FRISBEE_YAW_RATE = 0.2;
