// Per-vertex fitting-error heatmap on a fixed absolute scale so colors are
// comparable across records and rounds: 0 mm maps to cool blue, 45 mm and
// above to red. Vertices without a valid error (scan coverage holes) get a
// neutral grey that is outside the heat ramp.

export const ERROR_SCALE_MAX_MM = 45;
export const INVALID_COLOR: [number, number, number] = [0.55, 0.55, 0.55];

// Piecewise-linear ramp blue -> cyan -> green -> yellow -> red.
const STOPS: [number, number, number][] = [
  [0.12, 0.23, 0.67],
  [0.1, 0.75, 0.85],
  [0.2, 0.78, 0.25],
  [0.95, 0.9, 0.15],
  [0.85, 0.12, 0.09],
];

export function errorColor(errorMm: number | null | undefined): [number, number, number] {
  if (errorMm == null || !Number.isFinite(errorMm)) return [...INVALID_COLOR];
  const t = Math.min(Math.max(errorMm / ERROR_SCALE_MAX_MM, 0), 1);
  const scaled = t * (STOPS.length - 1);
  const i = Math.min(Math.floor(scaled), STOPS.length - 2);
  const f = scaled - i;
  const a = STOPS[i];
  const b = STOPS[i + 1];
  return [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f, a[2] + (b[2] - a[2]) * f];
}

export function vertexColors(errors: (number | null)[]): Float32Array {
  const out = new Float32Array(errors.length * 3);
  for (let i = 0; i < errors.length; i++) {
    const [r, g, b] = errorColor(errors[i]);
    out[i * 3] = r;
    out[i * 3 + 1] = g;
    out[i * 3 + 2] = b;
  }
  return out;
}
