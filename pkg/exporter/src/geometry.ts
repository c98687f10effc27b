/**
 * Farthest point sampling, k-NN grouping, and inverse-distance interpolation.
 *
 * These are independent reimplementations of the same algorithms the Python
 * xmad preprocess stage runs, kept drift-free by cross-implementation tests.
 * Distance accumulation walks coordinates in order with a double accumulator,
 * the same association the Python kernels use, so selected indices agree
 * exactly on shared inputs (ties included: argmax and argsort both resolve to
 * the lowest index).
 */

/** Euclidean distance from points[i] to a d-vector, coordinate-sequential. */
function distToPoint(points: Float64Array, d: number, i: number, ref: Float64Array, refOff: number): number {
  let acc = 0.0;
  const base = i * d;
  for (let j = 0; j < d; j++) {
    const t = points[base + j] - ref[refOff + j];
    acc += t * t;
  }
  return Math.sqrt(acc);
}

export interface FpsOptions {
  /** Explicit first pick; wins over seed when given. */
  start?: number;
}

/**
 * Greedy max-min sampling of n indices from count points (flat count x d).
 * Each pick after the first maximizes the minimum distance to everything
 * already chosen.
 */
export function farthestPointSample(
  points: Float64Array,
  d: number,
  count: number,
  n: number,
  start: number,
): Int32Array {
  if (count * d !== points.length) {
    throw new Error(`points length ${points.length} is not count ${count} x d ${d}`);
  }
  if (n < 0) {
    throw new Error("n must be >= 0");
  }
  if (n === 0) {
    return new Int32Array(0);
  }
  if (count === 0) {
    throw new Error("cannot sample from an empty point set");
  }
  if (n > count) {
    throw new Error(`cannot pick ${n} of ${count} points`);
  }
  if (!Number.isInteger(start) || start < 0 || start >= count) {
    throw new Error(`start index ${start} out of range [0, ${count})`);
  }

  const chosen = new Int32Array(n);
  chosen[0] = start;
  const minDist = new Float64Array(count);
  for (let i = 0; i < count; i++) {
    minDist[i] = distToPoint(points, d, i, points, start * d);
  }
  minDist[start] = -Infinity;
  for (let pick = 1; pick < n; pick++) {
    let best = 0;
    for (let i = 1; i < count; i++) {
      if (minDist[i] > minDist[best]) {
        best = i;
      }
    }
    chosen[pick] = best;
    for (let i = 0; i < count; i++) {
      const dist = distToPoint(points, d, i, points, best * d);
      if (dist < minDist[i]) {
        minDist[i] = dist;
      }
    }
    minDist[best] = -Infinity;
  }
  return chosen;
}

/**
 * k smallest (value, index) pairs in ascending lexicographic order. A size-k
 * max-heap keeps this O(n log k); ties always prefer the lower index, which
 * matches a stable full sort.
 */
function kSmallest(values: Float64Array, k: number, outIdx: Int32Array, outVal: Float64Array): void {
  const n = values.length;
  // heap root holds the current worst kept pair
  const worse = (d1: number, i1: number, d2: number, i2: number) =>
    d1 > d2 || (d1 === d2 && i1 > i2);
  let size = 0;
  const hd = outVal;
  const hi = outIdx;
  for (let i = 0; i < n; i++) {
    const v = values[i];
    if (size < k) {
      let c = size++;
      hd[c] = v;
      hi[c] = i;
      while (c > 0) {
        const p = (c - 1) >> 1;
        if (worse(hd[c], hi[c], hd[p], hi[p])) {
          [hd[c], hd[p]] = [hd[p], hd[c]];
          [hi[c], hi[p]] = [hi[p], hi[c]];
          c = p;
        } else {
          break;
        }
      }
    } else if (worse(hd[0], hi[0], v, i)) {
      hd[0] = v;
      hi[0] = i;
      let c = 0;
      for (;;) {
        const l = 2 * c + 1;
        const r = l + 1;
        let m = c;
        if (l < k && worse(hd[l], hi[l], hd[m], hi[m])) m = l;
        if (r < k && worse(hd[r], hi[r], hd[m], hi[m])) m = r;
        if (m === c) break;
        [hd[c], hd[m]] = [hd[m], hd[c]];
        [hi[c], hi[m]] = [hi[m], hi[c]];
        c = m;
      }
    }
  }
  // small k: insertion sort the heap contents into ascending order
  for (let i = 1; i < k; i++) {
    const dv = hd[i];
    const iv = hi[i];
    let j = i - 1;
    while (j >= 0 && worse(hd[j], hi[j], dv, iv)) {
      hd[j + 1] = hd[j];
      hi[j + 1] = hi[j];
      j--;
    }
    hd[j + 1] = dv;
    hi[j + 1] = iv;
  }
}

/**
 * For each center index, its m nearest points (center first, ties by index).
 * Returns one Int32Array of m indices per center.
 */
export function knnGroups(
  points: Float64Array,
  d: number,
  count: number,
  centers: Int32Array | number[],
  m: number,
): Int32Array[] {
  if (m < 1) {
    throw new Error("group size must be >= 1");
  }
  if (m > count) {
    throw new Error(`group size ${m} exceeds point count ${count}`);
  }
  const dist = new Float64Array(count);
  const groups: Int32Array[] = [];
  for (const center of centers) {
    for (let i = 0; i < count; i++) {
      dist[i] = distToPoint(points, d, i, points, center * d);
    }
    dist[center] = -1.0; // forces the center to sort first in its own group
    const idx = new Int32Array(m);
    const val = new Float64Array(m);
    kSmallest(dist, m, idx, val);
    groups.push(idx);
  }
  return groups;
}

/** Map (row, col) pixel coords onto another grid through half-pixel centers. */
export function scaleGridPositions(
  pixels: Float64Array,
  inRows: number,
  inCols: number,
  outRows: number,
  outCols: number,
): Float64Array {
  const out = new Float64Array(pixels.length);
  const scaleR = outRows / inRows;
  const scaleC = outCols / inCols;
  for (let i = 0; i < pixels.length; i += 2) {
    out[i] = (pixels[i] + 0.5) * scaleR - 0.5;
    out[i + 1] = (pixels[i + 1] + 0.5) * scaleC - 0.5;
  }
  return out;
}

/**
 * Inverse-distance-weighted interpolation of g scattered samples onto a
 * rows x cols grid. positions is flat g x 2 in output-grid units, values is
 * flat g x dim. A cell closer than 1e-12 to a sample copies it verbatim
 * (lowest index on ties); otherwise it blends the k nearest with weights
 * distance^-power. Returns flat rows x cols x dim float64.
 */
export function idwInterpolate(
  positions: Float64Array,
  values: Float64Array,
  dim: number,
  rows: number,
  cols: number,
  k: number,
  power: number,
): Float64Array {
  const g = positions.length / 2;
  if (!Number.isInteger(g) || g === 0) {
    throw new Error(`positions must be flat g x 2 with g >= 1, got length ${positions.length}`);
  }
  if (values.length !== g * dim) {
    throw new Error(`values length ${values.length} is not g ${g} x dim ${dim}`);
  }
  if (k < 1 || k > g) {
    throw new Error(`k=${k} must lie in [1, ${g}]`);
  }
  if (rows < 1 || cols < 1) {
    throw new Error(`bad output shape (${rows}, ${cols})`);
  }

  const out = new Float64Array(rows * cols * dim);
  const dist = new Float64Array(g);
  const nearIdx = new Int32Array(k);
  const nearVal = new Float64Array(k);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      for (let s = 0; s < g; s++) {
        const dr = r - positions[2 * s];
        const dc = c - positions[2 * s + 1];
        dist[s] = Math.sqrt(dr * dr + dc * dc);
      }
      kSmallest(dist, k, nearIdx, nearVal);
      const cell = (r * cols + c) * dim;
      if (nearVal[0] < 1e-12) {
        const src = nearIdx[0] * dim;
        for (let j = 0; j < dim; j++) {
          out[cell + j] = values[src + j];
        }
        continue;
      }
      let wsum = Math.pow(nearVal[0], -power);
      const src0 = nearIdx[0] * dim;
      for (let j = 0; j < dim; j++) {
        out[cell + j] = wsum * values[src0 + j];
      }
      for (let t = 1; t < k; t++) {
        const w = Math.pow(nearVal[t], -power);
        const src = nearIdx[t] * dim;
        for (let j = 0; j < dim; j++) {
          out[cell + j] += w * values[src + j];
        }
        wsum += w;
      }
      for (let j = 0; j < dim; j++) {
        out[cell + j] /= wsum;
      }
    }
  }
  return out;
}

/** 2x2 average pooling; rows and cols must be even. */
export function avgPool2(data: Float64Array, rows: number, cols: number, dim: number): Float64Array {
  if (rows % 2 || cols % 2) {
    throw new Error(`avgPool2 needs even dims, got (${rows}, ${cols})`);
  }
  const oRows = rows / 2;
  const oCols = cols / 2;
  const out = new Float64Array(oRows * oCols * dim);
  for (let r = 0; r < oRows; r++) {
    for (let c = 0; c < oCols; c++) {
      const a = ((2 * r) * cols + 2 * c) * dim;
      const b = ((2 * r) * cols + 2 * c + 1) * dim;
      const e = ((2 * r + 1) * cols + 2 * c) * dim;
      const f = ((2 * r + 1) * cols + 2 * c + 1) * dim;
      const o = (r * oCols + c) * dim;
      for (let j = 0; j < dim; j++) {
        out[o + j] = ((data[a + j] + data[b + j]) + (data[e + j] + data[f + j])) / 4.0;
      }
    }
  }
  return out;
}

/** Nearest-neighbor upsampling: each cell becomes a factorR x factorC block. */
export function repeatUpsample(
  data: Float64Array,
  rows: number,
  cols: number,
  dim: number,
  factorR: number,
  factorC: number = factorR,
): Float64Array {
  for (const f of [factorR, factorC]) {
    if (!Number.isInteger(f) || f < 1) {
      throw new Error(`upsample factor must be a positive integer, got ${f}`);
    }
  }
  const oCols = cols * factorC;
  const out = new Float64Array(rows * factorR * oCols * dim);
  for (let r = 0; r < rows * factorR; r++) {
    const sr = Math.floor(r / factorR);
    for (let c = 0; c < oCols; c++) {
      const sc = Math.floor(c / factorC);
      const src = (sr * cols + sc) * dim;
      const dst = (r * oCols + c) * dim;
      for (let j = 0; j < dim; j++) {
        out[dst + j] = data[src + j];
      }
    }
  }
  return out;
}
