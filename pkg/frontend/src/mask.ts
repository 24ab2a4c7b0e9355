/**
 * Stroke rasterization.
 *
 * A stroke is a brush path (or erase path) of canvas-space points with a
 * radius. Rasterization applies strokes in listed order: brush pixels set
 * to 1, erase pixels back to 0. No anti-aliasing anywhere — exported masks
 * are strictly binary, matching the pipeline's mask PNG contract.
 */

export interface Stroke {
  points: Array<[number, number]>;
  radius: number;
  erase: boolean;
}

/** Distance-to-segment test, squared, in pixel coordinates. */
function segmentDistanceSq(
  px: number, py: number,
  ax: number, ay: number,
  bx: number, by: number,
): number {
  const dx = bx - ax;
  const dy = by - ay;
  const lenSq = dx * dx + dy * dy;
  let t = 0;
  if (lenSq > 0) {
    t = ((px - ax) * dx + (py - ay) * dy) / lenSq;
    t = Math.max(0, Math.min(1, t));
  }
  const cx = ax + t * dx;
  const cy = ay + t * dy;
  return (px - cx) * (px - cx) + (py - cy) * (py - cy);
}

function stampSegment(
  mask: Uint8Array, width: number, height: number,
  ax: number, ay: number, bx: number, by: number,
  radius: number, value: number,
): void {
  const r = Math.max(0.5, radius);
  const x0 = Math.max(0, Math.floor(Math.min(ax, bx) - r));
  const x1 = Math.min(width - 1, Math.ceil(Math.max(ax, bx) + r));
  const y0 = Math.max(0, Math.floor(Math.min(ay, by) - r));
  const y1 = Math.min(height - 1, Math.ceil(Math.max(ay, by) + r));
  const rSq = r * r;
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      if (segmentDistanceSq(x, y, ax, ay, bx, by) <= rSq) {
        mask[y * width + x] = value;
      }
    }
  }
}

/** Rasterize strokes into a (height * width) {0,1} byte grid. */
export function rasterizeStrokes(
  strokes: Stroke[], width: number, height: number,
): Uint8Array {
  if (width <= 0 || height <= 0 || !Number.isInteger(width) || !Number.isInteger(height)) {
    throw new Error(`invalid canvas dims ${width}x${height}`);
  }
  const mask = new Uint8Array(width * height);
  for (const stroke of strokes) {
    const value = stroke.erase ? 0 : 1;
    const pts = stroke.points;
    if (pts.length === 0) continue;
    if (pts.length === 1) {
      stampSegment(mask, width, height, pts[0][0], pts[0][1], pts[0][0], pts[0][1],
        stroke.radius, value);
      continue;
    }
    for (let i = 0; i + 1 < pts.length; i++) {
      stampSegment(mask, width, height, pts[i][0], pts[i][1], pts[i + 1][0], pts[i + 1][1],
        stroke.radius, value);
    }
  }
  return mask;
}

export function maskIsEmpty(mask: Uint8Array): boolean {
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) return false;
  }
  return true;
}
