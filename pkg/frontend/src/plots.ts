/**
 * Minimal canvas plotting: time-series panels with gap markers, a
 * top-down + altitude trajectory view, and layer-activity bars. Pure
 * drawing, no retained state.
 */

import { Telemetry } from "./protocol";
import { gapIndices } from "./state";

export interface Series {
  t: number[];
  est: number[];
  gt: number[];
  sp: number[];
}

const COLORS = { est: "#4fc3f7", gt: "#aed581", sp: "#ffb74d", gap: "#e57373" };

function range(values: number[], pad = 0.1): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (!isFinite(lo) || !isFinite(hi)) return [-1, 1];
  if (hi - lo < 1e-6) {
    lo -= 0.5;
    hi += 0.5;
  }
  const d = (hi - lo) * pad;
  return [lo - d, hi + d];
}

export function drawTimeSeries(ctx: CanvasRenderingContext2D, w: number, h: number,
                               s: Series, label: string, gaps: number[]): void {
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#111820";
  ctx.fillRect(0, 0, w, h);
  if (s.t.length < 2) {
    ctx.fillStyle = "#889";
    ctx.fillText(`${label}: waiting for telemetry`, 8, h / 2);
    return;
  }
  const [t0, t1] = [s.t[0], s.t[s.t.length - 1]];
  const [lo, hi] = range([...s.est, ...s.gt, ...s.sp]);
  const x = (t: number) => ((t - t0) / Math.max(t1 - t0, 1e-9)) * (w - 10) + 5;
  const y = (v: number) => h - 14 - ((v - lo) / (hi - lo)) * (h - 24);

  // zero line
  if (lo < 0 && hi > 0) {
    ctx.strokeStyle = "#2a3642";
    ctx.beginPath();
    ctx.moveTo(0, y(0));
    ctx.lineTo(w, y(0));
    ctx.stroke();
  }
  const lines: [number[], string][] = [
    [s.gt, COLORS.gt],
    [s.sp, COLORS.sp],
    [s.est, COLORS.est],
  ];
  const gapSet = new Set(gaps);
  for (const [vals, color] of lines) {
    ctx.strokeStyle = color;
    ctx.beginPath();
    for (let i = 0; i < vals.length; i++) {
      const px = x(s.t[i]);
      const py = y(vals[i]);
      if (i === 0 || gapSet.has(i - 1)) ctx.moveTo(px, py);
      else ctx.lineTo(px, py);
    }
    ctx.stroke();
  }
  // gap markers
  ctx.fillStyle = COLORS.gap;
  for (const g of gaps) {
    ctx.fillRect(x(s.t[g]), 2, 2, h - 16);
  }
  ctx.fillStyle = "#ccd";
  ctx.fillText(`${label}  [${lo.toFixed(2)}, ${hi.toFixed(2)}]`, 8, 12);
}

export function drawTrajectory(ctx: CanvasRenderingContext2D, w: number, h: number,
                               ring: Telemetry[]): void {
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#111820";
  ctx.fillRect(0, 0, w, h);
  if (ring.length < 2) return;
  const split = Math.floor(w * 0.62);
  const xs = ring.map((r) => r.p[0]);
  const ys = ring.map((r) => r.p[1]);
  const zs = ring.map((r) => r.p[2]);
  const ts = ring.map((r) => r.t);
  const [xl, xh] = range(xs, 0.15);
  const [yl, yh] = range(ys, 0.15);
  const span = Math.max(xh - xl, yh - yl);
  const px = (v: number) => ((v - (xl + xh) / 2) / span + 0.5) * (split - 20) + 10;
  const py = (v: number) => ((v - (yl + yh) / 2) / span + 0.5) * (h - 20) + 10;
  ctx.strokeStyle = COLORS.est;
  ctx.beginPath();
  for (let i = 0; i < ring.length; i++) {
    if (i === 0) ctx.moveTo(px(xs[i]), py(ys[i]));
    else ctx.lineTo(px(xs[i]), py(ys[i]));
  }
  ctx.stroke();
  // current position
  ctx.fillStyle = COLORS.sp;
  ctx.beginPath();
  ctx.arc(px(xs[xs.length - 1]), py(ys[ys.length - 1]), 4, 0, Math.PI * 2);
  ctx.fill();
  ctx.fillStyle = "#ccd";
  ctx.fillText("top-down (x, y)", 8, 12);

  // altitude strip
  const [zl, zh] = range(zs, 0.15);
  const t0 = ts[0];
  const t1 = ts[ts.length - 1];
  const ax = (t: number) => split + 8 + ((t - t0) / Math.max(t1 - t0, 1e-9)) * (w - split - 16);
  const az = (v: number) => h - 12 - ((v - zl) / (zh - zl)) * (h - 24);
  ctx.strokeStyle = COLORS.gt;
  ctx.beginPath();
  for (let i = 0; i < ring.length; i++) {
    if (i === 0) ctx.moveTo(ax(ts[i]), az(zs[i]));
    else ctx.lineTo(ax(ts[i]), az(zs[i]));
  }
  ctx.stroke();
  ctx.fillStyle = "#ccd";
  ctx.fillText("altitude", split + 8, 12);
}

const LAYER_NAMES = ["input", "enc1", "enc2", "enc3", "pool"];

export function drawActivity(ctx: CanvasRenderingContext2D, w: number, h: number,
                             activity: number[]): void {
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#111820";
  ctx.fillRect(0, 0, w, h);
  const n = activity.length;
  if (!n) return;
  const bw = (w - 20) / n;
  for (let i = 0; i < n; i++) {
    const a = Math.min(1, Math.max(0, activity[i]));
    const x = 10 + i * bw;
    ctx.fillStyle = "#24313d";
    ctx.fillRect(x + 4, 14, bw - 8, h - 32);
    ctx.fillStyle = COLORS.est;
    const bh = (h - 32) * a;
    ctx.fillRect(x + 4, 14 + (h - 32) - bh, bw - 8, bh);
    ctx.fillStyle = "#ccd";
    ctx.fillText(LAYER_NAMES[i] ?? `L${i}`, x + 4, h - 6);
    ctx.fillText((a * 100).toFixed(0) + "%", x + 4, 10);
  }
}
