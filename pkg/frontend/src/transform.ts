// Workspace (meters, y up) to canvas (pixels, y down) mapping.  The fixed
// 0.5 x 0.3 m window covers every built-in trajectory: all shapes start at
// the origin and span up to 0.4 m in x and 0.2 m in y, and the margin of
// the box absorbs avoidance detours.  Uniform scale so circles stay round.

export interface Box {
  xMin: number;
  xMax: number;
  yMin: number;
  yMax: number;
}

export const WORKSPACE: Box = { xMin: -0.05, xMax: 0.45, yMin: -0.05, yMax: 0.25 };

export class WorkspaceTransform {
  readonly scale: number; // px per meter
  private readonly ox: number;
  private readonly oy: number;

  constructor(
    readonly box: Box,
    width: number,
    height: number,
    readonly margin = 24,
  ) {
    const spanX = box.xMax - box.xMin;
    const spanY = box.yMax - box.yMin;
    if (spanX <= 0 || spanY <= 0) {
      throw new Error("workspace box is degenerate");
    }
    if (width <= 2 * margin || height <= 2 * margin) {
      throw new Error("canvas smaller than twice the margin");
    }
    this.scale = Math.min((width - 2 * margin) / spanX, (height - 2 * margin) / spanY);
    // center the scaled box inside the margins; y axis flips
    this.ox = margin + (width - 2 * margin - spanX * this.scale) / 2 - box.xMin * this.scale;
    this.oy = height - margin - (height - 2 * margin - spanY * this.scale) / 2 + box.yMin * this.scale;
  }

  toScreen(p: readonly [number, number]): [number, number] {
    return [this.ox + p[0] * this.scale, this.oy - p[1] * this.scale];
  }

  toWorkspace(q: readonly [number, number]): [number, number] {
    return [(q[0] - this.ox) / this.scale, (this.oy - q[1]) / this.scale];
  }
}
