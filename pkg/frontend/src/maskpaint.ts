/**
 * The editable mask: a flat class-id buffer at native sample resolution.
 *
 * All painting happens directly on this buffer — the display layer only zooms
 * it with nearest-neighbor scaling, and export encodes the buffer verbatim, so
 * what is uploaded is bit-identical to what is painted.
 */

export const UNLABELED = 255; // matches the server's ignore value

export interface Brush {
  classId: number;
  radius: number;
}

export interface StrokePoint {
  x: number;
  y: number;
}

interface UndoRecord {
  indices: Int32Array;
  previous: Uint8Array;
}

export class MaskCanvas {
  readonly width: number;
  readonly height: number;
  readonly data: Uint8Array;
  private undoStack: UndoRecord[] = [];

  constructor(width: number, height: number, fill: number = UNLABELED) {
    this.width = width;
    this.height = height;
    this.data = new Uint8Array(width * height).fill(fill);
  }

  get canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  /** Copy of the current pixel state (what export will encode). */
  snapshot(): Uint8Array {
    return this.data.slice();
  }

  /** Replace the buffer (e.g. from a fetched mask); clears undo history. */
  loadFrom(pixels: Uint8Array): void {
    if (pixels.length !== this.data.length) {
      throw new Error(`mask size ${pixels.length} != ${this.data.length}`);
    }
    this.data.set(pixels);
    this.undoStack.length = 0;
  }

  /**
   * Stamp a round brush along the path (interpolating between points).
   * Returns the number of pixels that changed; pushes one undo record.
   */
  paintStroke(brush: Brush, path: StrokePoint[]): number {
    if (path.length === 0) return 0;
    const touched = new Map<number, number>();
    let prev = path[0];
    this.stampDisc(brush, prev.x, prev.y, touched);
    for (let i = 1; i < path.length; i++) {
      const next = path[i];
      const dist = Math.hypot(next.x - prev.x, next.y - prev.y);
      const steps = Math.max(1, Math.ceil(dist * 2));
      for (let s = 1; s <= steps; s++) {
        const t = s / steps;
        this.stampDisc(brush, prev.x + (next.x - prev.x) * t,
                       prev.y + (next.y - prev.y) * t, touched);
      }
      prev = next;
    }
    return this.commit(touched, brush.classId);
  }

  /** Set every pixel to one class (undoable). */
  fill(classId: number): number {
    const touched = new Map<number, number>();
    for (let i = 0; i < this.data.length; i++) {
      if (this.data[i] !== classId) touched.set(i, this.data[i]);
    }
    return this.commit(touched, classId);
  }

  /** Restore the exact mask state before the latest stroke or fill. */
  undo(): boolean {
    const record = this.undoStack.pop();
    if (!record) return false;
    for (let i = 0; i < record.indices.length; i++) {
      this.data[record.indices[i]] = record.previous[i];
    }
    return true;
  }

  private stampDisc(brush: Brush, cx: number, cy: number,
                    touched: Map<number, number>): void {
    const r = Math.max(brush.radius, 0.5);
    const x0 = Math.max(0, Math.floor(cx - r));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + r));
    const y0 = Math.max(0, Math.floor(cy - r));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + r));
    const r2 = r * r;
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x + 0.5 - cx;
        const dy = y + 0.5 - cy;
        if (dx * dx + dy * dy > r2) continue;
        const idx = y * this.width + x;
        if (this.data[idx] !== brush.classId && !touched.has(idx)) {
          touched.set(idx, this.data[idx]);
        }
      }
    }
  }

  private commit(touched: Map<number, number>, classId: number): number {
    if (touched.size === 0) return 0;
    const indices = new Int32Array(touched.size);
    const previous = new Uint8Array(touched.size);
    let i = 0;
    for (const [idx, prev] of touched) {
      indices[i] = idx;
      previous[i] = prev;
      this.data[idx] = classId;
      i++;
    }
    this.undoStack.push({ indices, previous });
    return touched.size;
  }
}
