// Pointer-derived human force: a virtual spring between the end effector
// and the cursor, norm-clamped to the session's force cap.  A stand-in for
// a physical force sensor, so the spring gain is a UI preference rather
// than a plant parameter.

export interface InputMapping {
  kUi: number; // [N/m]
  cap: number; // [N], mirrors the server side clamp
  sendRateHz: number; // outbound force messages per second
}

export const DEFAULT_MAPPING: InputMapping = { kUi: 120, cap: 30, sendRateHz: 60 };

export function validateMapping(m: InputMapping): InputMapping {
  if (!(m.kUi > 0)) throw new Error("k_ui must be positive");
  if (!(m.cap > 0)) throw new Error("force cap must be positive");
  if (!(m.sendRateHz > 0)) throw new Error("send rate must be positive");
  return m;
}

export function pointerToForce(
  cursor: readonly [number, number],
  x: readonly [number, number],
  m: InputMapping,
): [number, number] {
  const fx = m.kUi * (cursor[0] - x[0]);
  const fy = m.kUi * (cursor[1] - x[1]);
  const norm = Math.hypot(fx, fy);
  if (norm > m.cap) {
    const s = m.cap / norm;
    return [fx * s, fy * s];
  }
  return [fx, fy];
}

/**
 * Outbound pacing.  One send per 1/rate seconds at most, and never faster
 * than the session streams states, whatever the mapping asks for.
 */
export class SendGate {
  private last = -Infinity;
  readonly intervalMs: number;

  constructor(mapping: InputMapping, sessionRateHz: number) {
    const rate = Math.min(validateMapping(mapping).sendRateHz, sessionRateHz);
    this.intervalMs = 1000 / rate;
  }

  ready(nowMs: number): boolean {
    if (nowMs - this.last >= this.intervalMs) {
      this.last = nowMs;
      return true;
    }
    return false;
  }
}
