// Wire protocol shared with the teleop service. Field names are fixed.

export interface InputMsg {
  type: "input";
  dp: [number, number, number];
  drot: [number, number, number];
  grip: number;
  seq: number;
}

export interface AssistMsg {
  type: "assist";
  enabled: boolean;
}

export interface RecordMsg {
  type: "record";
  enabled: boolean;
}

export interface ResetMsg {
  type: "reset";
  seed: number;
}

export type ClientMsg = InputMsg | AssistMsg | RecordMsg | ResetMsg;

export interface EePose {
  p: [number, number, number];
  q: [number, number, number, number];
  v: number[];
  gripper: number;
}

export interface ObjectPose {
  name: string;
  p: [number, number, number];
  q: [number, number, number, number];
  attached: boolean;
}

export interface StateMsg {
  type: "state";
  tick: number;
  ee: EePose;
  objects: ObjectPose[];
  wrench: number[];
  progression: number;
  reward: number;
  events: string[];
  assist: boolean;
  recording?: boolean;
  terminated?: boolean;
}

export interface TaskGeometry {
  kind: string;
  hole_radius: number;
  part_radius: number;
  part_length: number;
  axis_xy: [number, number];
  entry_z: number;
  plate_radius: number;
  base_radius: number;
  base_z: number;
  table_z: number;
  insertion_depth: number;
  force_limit: number;
  e_max: number;
  success_pose_p: [number, number, number];
}

export interface ConfigMsg {
  type: "config";
  session: string;
  rate_hz: number;
  task: TaskGeometry;
  assist_available: boolean;
}

export type ServerMsg = StateMsg | ConfigMsg;

export function parseServerMsg(raw: string): ServerMsg | null {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof doc !== "object" || doc === null) return null;
  const t = (doc as { type?: unknown }).type;
  if (t === "state") {
    const m = doc as StateMsg;
    if (typeof m.tick !== "number" || !m.ee || !Array.isArray(m.objects)) {
      return null;
    }
    return m;
  }
  if (t === "config") {
    const m = doc as ConfigMsg;
    if (!m.task || typeof m.rate_hz !== "number") return null;
    return m;
  }
  return null;
}
