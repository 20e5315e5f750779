// Keyboard capture: held keys map to bounded per-tick pose deltas.
// Opposing keys cancel; sequence numbers are strictly increasing.

import { InputMsg } from "./protocol.js";

export interface InputConfig {
  posStep: number; // meters per tick per axis
  rotStep: number; // radians per tick
}

export const DEFAULT_INPUT: InputConfig = { posStep: 0.004, rotStep: 0.03 };

// key -> [axis(0..2 pos, 3..5 rot), sign]
const KEY_MAP: Record<string, [number, number]> = {
  w: [0, +1],
  s: [0, -1],
  a: [1, +1],
  d: [1, -1],
  r: [2, +1],
  f: [2, -1],
  arrowleft: [5, +1],
  arrowright: [5, -1],
  arrowup: [4, +1],
  arrowdown: [4, -1],
  ",": [3, +1],
  ".": [3, -1],
};

export class InputMapper {
  private seq = 0;
  grip = 1.0; // open

  constructor(private cfg: InputConfig = DEFAULT_INPUT) {}

  toggleGrip(): number {
    this.grip = this.grip > 0 ? -1.0 : 1.0;
    return this.grip;
  }

  /** Build the per-tick input message, or null when nothing is held and the
   * gripper target is unchanged (the server holds the previous target). */
  build(held: Set<string>, force = false): InputMsg | null {
    const delta = [0, 0, 0, 0, 0, 0];
    for (const key of held) {
      const m = KEY_MAP[key.toLowerCase()];
      if (m) delta[m[0]] += m[1];
    }
    const dp: [number, number, number] = [
      delta[0] * this.cfg.posStep,
      delta[1] * this.cfg.posStep,
      delta[2] * this.cfg.posStep,
    ];
    const drot: [number, number, number] = [
      delta[3] * this.cfg.rotStep,
      delta[4] * this.cfg.rotStep,
      delta[5] * this.cfg.rotStep,
    ];
    const moving = delta.some((d) => d !== 0);
    if (!moving && !force) return null;
    this.seq += 1;
    return { type: "input", dp, drot, grip: this.grip, seq: this.seq };
  }

  /** Force-send the current gripper target (after a toggle). */
  gripMessage(): InputMsg {
    this.seq += 1;
    return {
      type: "input",
      dp: [0, 0, 0],
      drot: [0, 0, 0],
      grip: this.grip,
      seq: this.seq,
    };
  }

  get lastSeq(): number {
    return this.seq;
  }
}
