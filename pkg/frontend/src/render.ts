// Canvas renderer: top + side orthographic views, an insertion zoom inset,
// wrench and progression bars, and status badges. The client never simulates;
// everything drawn comes from the latest server state.

import { ConfigMsg, StateMsg } from "./protocol.js";

export interface Ctx2D {
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  strokeRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  stroke(): void;
  fill(): void;
  fillText(text: string, x: number, y: number): void;
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
}

export interface BarLayout {
  progressionWidth: number;
  wrenchWidth: number;
  wrenchMarkerX: number;
  wrenchWarning: boolean;
}

/** Pure layout math for the telemetry bars; progression maps exactly. */
export function layoutBars(
  state: StateMsg,
  cfg: ConfigMsg,
  barWidth: number
): BarLayout {
  const f = Math.hypot(state.wrench[0], state.wrench[1], state.wrench[2]);
  const limit = cfg.task.force_limit;
  const frac = Math.min(f / limit, 1.25); // headroom past the marker
  const markerFrac = 1 / 1.25;
  return {
    progressionWidth: state.progression * barWidth,
    wrenchWidth: (frac / 1.25) * barWidth,
    wrenchMarkerX: markerFrac * barWidth,
    wrenchWarning: f >= limit,
  };
}

const COLORS = {
  bg: "#10141a",
  grid: "#2a3340",
  table: "#4a5a6a",
  fixture: "#5d7290",
  bore: "#10141a",
  part: "#e0a33c",
  partAttached: "#f2c14e",
  ee: "#6fd3f2",
  goal: "#43d17a",
  barBack: "#222a33",
  progression: "#43d17a",
  wrench: "#6fd3f2",
  wrenchWarn: "#e05c4b",
  marker: "#e0e6ec",
  text: "#cfd8e3",
  badgeOn: "#43d17a",
  badgeOff: "#3a4552",
  rec: "#e05c4b",
  error: "#e05c4b",
};

interface Viewport {
  x0: number;
  y0: number;
  w: number;
  h: number;
  scale: number; // px per meter
  cx: number; // world coords mapped to viewport center
  cy: number;
}

function toPx(v: Viewport, wx: number, wy: number): [number, number] {
  return [
    v.x0 + v.w / 2 + (wx - v.cx) * v.scale,
    v.y0 + v.h / 2 - (wy - v.cy) * v.scale,
  ];
}

export class SceneRenderer {
  constructor(
    private ctx: Ctx2D,
    private width: number,
    private height: number
  ) {}

  render(state: StateMsg | null, cfg: ConfigMsg | null, status: {
    connected: boolean;
    error: string | null;
    eventLog: string[];
  }): void {
    const c = this.ctx;
    c.fillStyle = COLORS.bg;
    c.fillRect(0, 0, this.width, this.height);
    if (!status.connected) {
      this.banner("connecting…", COLORS.text);
    }
    if (status.error) {
      this.banner(status.error, COLORS.error);
    }
    if (!state || !cfg) return;

    const half = this.width / 2;
    const side: Viewport = {
      x0: 8, y0: 40, w: half - 16, h: this.height - 150,
      scale: (half - 32) / 0.44, cx: 0.0, cy: 0.11,
    };
    const top: Viewport = {
      x0: half + 8, y0: 40, w: half - 16, h: this.height - 150,
      scale: (half - 32) / 0.44, cx: 0.0, cy: 0.0,
    };
    this.sideView(side, state, cfg);
    this.topView(top, state, cfg);
    this.zoomInset(state, cfg);
    this.bars(state, cfg);
    this.badges(state, cfg);
    this.events(status.eventLog);
  }

  private banner(text: string, color: string): void {
    const c = this.ctx;
    c.fillStyle = color;
    c.font = "14px monospace";
    c.fillText(text, 12, 18);
  }

  private frame(v: Viewport, label: string): void {
    const c = this.ctx;
    c.strokeStyle = COLORS.grid;
    c.lineWidth = 1;
    c.strokeRect(v.x0, v.y0, v.w, v.h);
    c.fillStyle = COLORS.text;
    c.font = "11px monospace";
    c.fillText(label, v.x0 + 4, v.y0 + 12);
  }

  private sideView(v: Viewport, s: StateMsg, cfg: ConfigMsg): void {
    const c = this.ctx;
    this.frame(v, "side (x–z)");
    const t = cfg.task;
    // table
    c.strokeStyle = COLORS.table;
    c.lineWidth = 2;
    c.beginPath();
    const [tx0, ty] = toPx(v, -0.21, t.table_z);
    const [tx1] = toPx(v, 0.21, t.table_z);
    c.moveTo(tx0, ty);
    c.lineTo(tx1, ty);
    c.stroke();
    // fixture silhouette with bore slot
    const ax = t.axis_xy[0];
    c.fillStyle = COLORS.fixture;
    const [fx0, fy0] = toPx(v, ax - t.plate_radius, t.entry_z);
    const [fx1, fy1] = toPx(v, ax + t.plate_radius, t.table_z);
    c.fillRect(fx0, fy0, fx1 - fx0, fy1 - fy0);
    c.fillStyle = COLORS.bore;
    const [bx0, by0] = toPx(v, ax - t.hole_radius, t.entry_z);
    const [bx1, by1] = toPx(v, ax + t.hole_radius, t.entry_z - t.insertion_depth);
    c.fillRect(bx0, by0, bx1 - bx0, by1 - by0);
    // goal marker
    c.fillStyle = COLORS.goal;
    const [gx, gy] = toPx(v, t.success_pose_p[0], t.success_pose_p[2]);
    c.fillRect(gx - 2, gy - 2, 4, 4);
    // held part
    const held = s.objects.find((o) => o.name === "held");
    if (held) {
      c.fillStyle = held.attached ? COLORS.partAttached : COLORS.part;
      const w = Math.max(2 * t.part_radius * v.scale, 4);
      const h = Math.max(t.part_length * v.scale, 6);
      const [px, py] = toPx(v, held.p[0], held.p[2]);
      c.fillRect(px - w / 2, py - h / 2, w, h);
    }
    // end effector crosshair + jaws
    const [ex, ey] = toPx(v, s.ee.p[0], s.ee.p[2]);
    c.strokeStyle = COLORS.ee;
    c.lineWidth = 2;
    c.beginPath();
    c.moveTo(ex - 7, ey);
    c.lineTo(ex + 7, ey);
    c.moveTo(ex, ey - 7);
    c.lineTo(ex, ey + 7);
    c.stroke();
    const jaw = s.ee.gripper > 0 ? 8 : 3;
    c.strokeRect(ex - jaw, ey - 2, 2 * jaw, 10);
  }

  private topView(v: Viewport, s: StateMsg, cfg: ConfigMsg): void {
    const c = this.ctx;
    this.frame(v, "top (x–y)");
    const t = cfg.task;
    const circle = (wx: number, wy: number, r: number, fill: string | null,
                    stroke: string | null) => {
      const [px, py] = toPx(v, wx, wy);
      c.beginPath();
      c.arc(px, py, Math.max(r * v.scale, 2), 0, 2 * Math.PI);
      if (fill) {
        c.fillStyle = fill;
        c.fill();
      }
      if (stroke) {
        c.strokeStyle = stroke;
        c.stroke();
      }
    };
    circle(t.axis_xy[0], t.axis_xy[1], t.plate_radius, COLORS.fixture, null);
    circle(t.axis_xy[0], t.axis_xy[1], t.hole_radius, COLORS.bore, COLORS.grid);
    const held = s.objects.find((o) => o.name === "held");
    if (held) {
      circle(held.p[0], held.p[1], t.part_radius,
             held.attached ? COLORS.partAttached : COLORS.part, null);
    }
    const [ex, ey] = toPx(v, s.ee.p[0], s.ee.p[1]);
    c.strokeStyle = COLORS.ee;
    c.lineWidth = 2;
    c.beginPath();
    c.moveTo(ex - 7, ey);
    c.lineTo(ex + 7, ey);
    c.moveTo(ex, ey - 7);
    c.lineTo(ex, ey + 7);
    c.stroke();
  }

  private zoomInset(s: StateMsg, cfg: ConfigMsg): void {
    const c = this.ctx;
    const t = cfg.task;
    const v: Viewport = {
      x0: this.width / 2 - 70, y0: 44, w: 132, h: 120,
      scale: 132 / 0.05, cx: t.axis_xy[0], cy: t.entry_z,
    };
    c.fillStyle = COLORS.bg;
    c.fillRect(v.x0, v.y0, v.w, v.h);
    this.frame(v, "zoom 8x");
    const ax = t.axis_xy[0];
    c.fillStyle = COLORS.fixture;
    const [fx0, fy0] = toPx(v, ax - 0.03, t.entry_z);
    const [fx1, fy1] = toPx(v, ax + 0.03, t.entry_z - 0.02);
    c.fillRect(fx0, fy0, fx1 - fx0, fy1 - fy0);
    c.fillStyle = COLORS.bore;
    const [bx0, by0] = toPx(v, ax - t.hole_radius, t.entry_z);
    const [bx1, by1] = toPx(v, ax + t.hole_radius, t.entry_z - t.insertion_depth);
    c.fillRect(bx0, by0, bx1 - bx0, by1 - by0);
    const held = s.objects.find((o) => o.name === "held");
    if (held) {
      c.fillStyle = held.attached ? COLORS.partAttached : COLORS.part;
      const w = 2 * t.part_radius * v.scale;
      const h = t.part_length * v.scale;
      const [px, py] = toPx(v, held.p[0], held.p[2]);
      c.fillRect(px - w / 2, py - h / 2, w, h);
    }
  }

  private bars(s: StateMsg, cfg: ConfigMsg): void {
    const c = this.ctx;
    const barW = this.width - 180;
    const layout = layoutBars(s, cfg, barW);
    const y0 = this.height - 96;
    c.fillStyle = COLORS.text;
    c.font = "12px monospace";
    c.fillText(`progression ${s.progression.toFixed(3)}`, 12, y0 - 4);
    c.fillStyle = COLORS.barBack;
    c.fillRect(12, y0, barW, 14);
    c.fillStyle = COLORS.progression;
    c.fillRect(12, y0, layout.progressionWidth, 14);

    const y1 = y0 + 38;
    const f = Math.hypot(s.wrench[0], s.wrench[1], s.wrench[2]);
    c.fillStyle = COLORS.text;
    c.fillText(`|force| ${f.toFixed(2)} N (limit ${cfg.task.force_limit})`, 12, y1 - 4);
    c.fillStyle = COLORS.barBack;
    c.fillRect(12, y1, barW, 14);
    c.fillStyle = layout.wrenchWarning ? COLORS.wrenchWarn : COLORS.wrench;
    c.fillRect(12, y1, layout.wrenchWidth, 14);
    c.fillStyle = COLORS.marker;
    c.fillRect(12 + layout.wrenchMarkerX - 1, y1 - 3, 2, 20);
  }

  private badges(s: StateMsg, cfg: ConfigMsg): void {
    const c = this.ctx;
    const x = this.width - 150;
    let y = this.height - 100;
    const badge = (label: string, on: boolean, onColor: string) => {
      c.fillStyle = on ? onColor : COLORS.badgeOff;
      c.fillRect(x, y, 120, 18);
      c.fillStyle = COLORS.bg;
      c.font = "12px monospace";
      c.fillText(label, x + 8, y + 13);
      y += 24;
    };
    badge(s.assist ? "ASSIST ON" : "assist off", s.assist, COLORS.badgeOn);
    badge(s.recording ? "RECORDING" : "rec off", !!s.recording, COLORS.rec);
    badge(s.terminated ? "EPISODE OVER" : `tick ${s.tick}`, !!s.terminated,
          COLORS.wrenchWarn);
  }

  private events(log: string[]): void {
    const c = this.ctx;
    c.fillStyle = COLORS.text;
    c.font = "11px monospace";
    let y = this.height - 28;
    for (const line of log.slice(-2)) {
      c.fillText(line, 12, y);
      y += 13;
    }
  }
}
