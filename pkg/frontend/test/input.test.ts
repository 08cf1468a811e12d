import { describe, expect, it } from "vitest";

import { DEFAULT_MAPPING, SendGate, pointerToForce, validateMapping } from "../src/input.js";

const mapping = { kUi: 50, cap: 30, sendRateHz: 60 };

describe("pointer force", () => {
  it("is zero with the cursor on the end effector", () => {
    expect(pointerToForce([0.2, 0.1], [0.2, 0.1], mapping)).toEqual([0, 0]);
  });

  it("is the spring gain times the displacement", () => {
    // 0.125 m is exact in binary, so the product is too
    expect(pointerToForce([0.25, 0.1], [0.125, 0.1], mapping)).toEqual([6.25, 0]);
    const f = pointerToForce([0.23, 0.14], [0.2, 0.1], mapping);
    expect(f[0]).toBeCloseTo(1.5, 12);
    expect(f[1]).toBeCloseTo(2.0, 12);
  });

  it("clamps the norm to the cap, keeping the direction", () => {
    const f = pointerToForce([10, 0.1], [0, 0.1], mapping);
    expect(Math.hypot(f[0], f[1])).toBeCloseTo(30, 12);
    expect(f[1]).toBe(0);
    const diag = pointerToForce([3, 4], [0, 0], mapping);
    expect(Math.hypot(diag[0], diag[1])).toBeCloseTo(30, 12);
    expect(diag[1] / diag[0]).toBeCloseTo(4 / 3, 12);
  });

  it("rejects non-positive gains, caps and rates", () => {
    expect(() => validateMapping({ ...mapping, kUi: 0 })).toThrow(/k_ui/);
    expect(() => validateMapping({ ...mapping, cap: -1 })).toThrow(/cap/);
    expect(() => validateMapping({ ...mapping, sendRateHz: 0 })).toThrow(/rate/);
    expect(validateMapping(DEFAULT_MAPPING)).toBe(DEFAULT_MAPPING);
  });
});

describe("send gate", () => {
  it("never exceeds the configured send rate", () => {
    const gate = new SendGate(mapping, 125);
    let sends = 0;
    for (let now = 0; now < 10_000; now += 1) {
      if (gate.ready(now)) sends += 1;
    }
    // 60 Hz over 10 s with 1 ms polling; integer stepping loses a little
    expect(sends).toBeLessThanOrEqual(601);
    expect(sends).toBeGreaterThan(550);
  });

  it("is capped by the session rate", () => {
    const eager = new SendGate({ ...mapping, sendRateHz: 500 }, 125);
    expect(eager.intervalMs).toBe(8);
    const lazy = new SendGate(mapping, 40);
    expect(lazy.intervalMs).toBe(25);
  });

  it("fires immediately on the first poll", () => {
    const gate = new SendGate(mapping, 125);
    expect(gate.ready(123.4)).toBe(true);
    expect(gate.ready(123.5)).toBe(false);
  });
});
