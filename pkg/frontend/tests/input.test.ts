import { describe, expect, it } from "vitest";

import { InputMapper } from "../src/input.js";

const cfg = { posStep: 0.004, rotStep: 0.03 };

describe("InputMapper", () => {
  it("returns null when nothing is held (server holds the target)", () => {
    const m = new InputMapper(cfg);
    expect(m.build(new Set())).toBeNull();
  });

  it("maps a single forward key to a +x step", () => {
    const m = new InputMapper(cfg);
    const msg = m.build(new Set(["w"]));
    expect(msg).not.toBeNull();
    expect(msg!.dp).toEqual([0.004, 0, 0]);
    expect(msg!.drot).toEqual([0, 0, 0]);
  });

  it("cancels simultaneous opposing keys", () => {
    const m = new InputMapper(cfg);
    const msg = m.build(new Set(["w", "s", "a", "d"]));
    expect(msg).toBeNull(); // zero net delta: nothing to send
  });

  it("combines axes", () => {
    const m = new InputMapper(cfg);
    const msg = m.build(new Set(["w", "r", "arrowleft"]));
    expect(msg!.dp).toEqual([0.004, 0, 0.004]);
    expect(msg!.drot[2]).toBeCloseTo(0.03, 12);
  });

  it("emits strictly increasing sequence numbers", () => {
    const m = new InputMapper(cfg);
    const seqs: number[] = [];
    for (let i = 0; i < 5; i++) {
      const msg = m.build(new Set(["w"]));
      seqs.push(msg!.seq);
    }
    const grip = m.gripMessage();
    seqs.push(grip.seq);
    for (let i = 1; i < seqs.length; i++) {
      expect(seqs[i]).toBeGreaterThan(seqs[i - 1]);
    }
  });

  it("toggles the gripper between open and closed", () => {
    const m = new InputMapper(cfg);
    expect(m.grip).toBe(1.0);
    expect(m.toggleGrip()).toBe(-1.0);
    expect(m.gripMessage().grip).toBe(-1.0);
    expect(m.toggleGrip()).toBe(1.0);
  });

  it("is case-insensitive on keys", () => {
    const m = new InputMapper(cfg);
    const msg = m.build(new Set(["W"]));
    expect(msg!.dp[0]).toBeCloseTo(0.004, 12);
  });
});
