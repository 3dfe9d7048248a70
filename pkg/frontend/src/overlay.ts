/**
 * Pure pixel blending for the annotation/preview overlay. Kept DOM-free so
 * the refine-loop affordances (per-class toggles, opacity) are testable.
 */

import { UNLABELED } from "./maskpaint.js";

export type Rgb = [number, number, number];

/**
 * Blend class colors over an RGBA image buffer.
 *
 * Pixels whose class is hidden (or unlabeled) keep the base image value.
 * `opacity` 0 shows only the image, 1 only the class color.
 */
export function blendOverlay(
  image: Uint8ClampedArray,
  labels: Uint8Array,
  colors: Rgb[],
  visible: boolean[],
  opacity: number,
  out?: Uint8ClampedArray,
): Uint8ClampedArray {
  if (image.length !== labels.length * 4) {
    throw new Error(`image ${image.length} != 4x labels ${labels.length}`);
  }
  const result = out ?? new Uint8ClampedArray(image.length);
  const alpha = Math.min(Math.max(opacity, 0), 1);
  for (let i = 0; i < labels.length; i++) {
    const cls = labels[i];
    const base = i * 4;
    const shown = cls !== UNLABELED && cls < colors.length && (visible[cls] ?? true);
    if (!shown) {
      result[base] = image[base];
      result[base + 1] = image[base + 1];
      result[base + 2] = image[base + 2];
    } else {
      const color = colors[cls];
      result[base] = image[base] * (1 - alpha) + color[0] * alpha;
      result[base + 1] = image[base + 1] * (1 - alpha) + color[1] * alpha;
      result[base + 2] = image[base + 2] * (1 - alpha) + color[2] * alpha;
    }
    result[base + 3] = 255;
  }
  return result;
}

/** Expand a class-id buffer to RGBA using the palette (for mask-only view). */
export function labelsToRgba(
  labels: Uint8Array,
  colors: Rgb[],
  out?: Uint8ClampedArray,
): Uint8ClampedArray {
  const result = out ?? new Uint8ClampedArray(labels.length * 4);
  for (let i = 0; i < labels.length; i++) {
    const cls = labels[i];
    const base = i * 4;
    if (cls === UNLABELED || cls >= colors.length) {
      result[base] = 40;
      result[base + 1] = 40;
      result[base + 2] = 40;
      result[base + 3] = 255;
    } else {
      result[base] = colors[cls][0];
      result[base + 1] = colors[cls][1];
      result[base + 2] = colors[cls][2];
      result[base + 3] = 255;
    }
  }
  return result;
}
