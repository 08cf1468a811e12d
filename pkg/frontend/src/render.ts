// Canvas drawing of the monitor: nominal path, obstacle, robot reference
// (red dot), current position (green cross), predicted horizon as a fading
// polyline, and the live force vector.  Pure readout of a ViewState; the
// drawing never advances anything.

import type { WorkspaceTransform } from "./transform.js";
import type { ViewState } from "./view.js";

/** Opacity of the i-th of n predicted points; near points read strongest. */
export function fadeAlpha(i: number, n: number): number {
  if (n <= 1) return 0.9;
  return 0.9 - (0.75 * i) / (n - 1);
}

function polyline(ctx: CanvasRenderingContext2D, tf: WorkspaceTransform, pts: readonly [number, number][]) {
  ctx.beginPath();
  pts.forEach((p, i) => {
    const [sx, sy] = tf.toScreen(p);
    if (i === 0) ctx.moveTo(sx, sy);
    else ctx.lineTo(sx, sy);
  });
  ctx.stroke();
}

export function drawFrame(
  ctx: CanvasRenderingContext2D,
  view: ViewState,
  tf: WorkspaceTransform,
  width: number,
  height: number,
): void {
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#11151a";
  ctx.fillRect(0, 0, width, height);

  const session = view.session;
  if (session) {
    ctx.strokeStyle = "#8899aa";
    ctx.lineWidth = 1.5;
    ctx.setLineDash([6, 5]);
    polyline(ctx, tf, session.path);
    ctx.setLineDash([]);
  }

  if (view.obstacle) {
    const half = view.obstacle.half_width * tf.scale;
    const [cx, cy] = tf.toScreen(view.obstacle.center);
    ctx.fillStyle = "rgba(204, 51, 51, 0.55)";
    ctx.strokeStyle = "#cc3333";
    ctx.lineWidth = 1.5;
    ctx.fillRect(cx - half, cy - half, 2 * half, 2 * half);
    ctx.strokeRect(cx - half, cy - half, 2 * half, 2 * half);
  }

  if (view.prediction) {
    const pts = view.prediction.points;
    ctx.lineWidth = 2;
    for (let i = 1; i < pts.length; i++) {
      ctx.strokeStyle = `rgba(255, 120, 90, ${fadeAlpha(i, pts.length).toFixed(3)})`;
      ctx.beginPath();
      const [ax, ay] = tf.toScreen(pts[i - 1]);
      const [bx, by] = tf.toScreen(pts[i]);
      ctx.moveTo(ax, ay);
      ctx.lineTo(bx, by);
      ctx.stroke();
    }
  }

  if (view.xRefR) {
    const [rx, ry] = tf.toScreen([view.xRefR[0], view.xRefR[1]]);
    ctx.fillStyle = "#dd2222";
    ctx.beginPath();
    ctx.arc(rx, ry, 5, 0, 2 * Math.PI);
    ctx.fill();
  }

  if (view.x) {
    const [px, py] = tf.toScreen([view.x[0], view.x[1]]);
    ctx.strokeStyle = "#33cc55";
    ctx.lineWidth = 2.5;
    ctx.beginPath();
    ctx.moveTo(px - 8, py);
    ctx.lineTo(px + 8, py);
    ctx.moveTo(px, py - 8);
    ctx.lineTo(px, py + 8);
    ctx.stroke();

    if (view.uH) {
      // force overlay, px per newton chosen so the cap spans ~90 px
      const fscale = 3;
      ctx.strokeStyle = "#f0c040";
      ctx.lineWidth = 2;
      ctx.beginPath();
      ctx.moveTo(px, py);
      ctx.lineTo(px + view.uH[0] * fscale, py - view.uH[1] * fscale);
      ctx.stroke();
    }
  }

  if (view.banner) {
    ctx.fillStyle = "rgba(0, 0, 0, 0.55)";
    ctx.fillRect(0, height / 2 - 26, width, 52);
    ctx.fillStyle = "#ffcc66";
    ctx.font = "18px sans-serif";
    ctx.textAlign = "center";
    ctx.fillText(view.banner, width / 2, height / 2 + 6);
    ctx.textAlign = "start";
  }
}
