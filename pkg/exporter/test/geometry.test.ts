import { describe, expect, it } from "vitest";
import {
  avgPool2,
  farthestPointSample,
  idwInterpolate,
  knnGroups,
  repeatUpsample,
  scaleGridPositions,
} from "../src/geometry.js";
import { mulberry32, pythonJson } from "./helpers.js";

function randomPoints(n: number, d: number, seed: number): Float64Array {
  const rand = mulberry32(seed);
  const pts = new Float64Array(n * d);
  for (let i = 0; i < pts.length; i++) pts[i] = rand() * 2 - 1;
  return pts;
}

function toNested(flat: Float64Array, d: number): number[][] {
  const out: number[][] = [];
  for (let i = 0; i < flat.length; i += d) out.push([...flat.subarray(i, i + d)]);
  return out;
}

describe("farthest point sampling", () => {
  it("picks the opposite corner of a unit square first", () => {
    const pts = new Float64Array([0, 0, 0, 1, 1, 0, 1, 1]);
    const picked = farthestPointSample(pts, 2, 4, 2, 0);
    expect([...picked]).toEqual([0, 3]);
  });

  it("matches a brute-force greedy max-min oracle", () => {
    for (let trial = 0; trial < 10; trial++) {
      const n = 40 + trial;
      const pts = randomPoints(n, 3, 100 + trial);
      const k = 8;
      const got = farthestPointSample(pts, 3, n, k, trial % n);

      const chosen = [trial % n];
      const minDist = new Float64Array(n).fill(Infinity);
      while (chosen.length < k) {
        const last = chosen[chosen.length - 1];
        for (let i = 0; i < n; i++) {
          const dx = pts[i * 3] - pts[last * 3];
          const dy = pts[i * 3 + 1] - pts[last * 3 + 1];
          const dz = pts[i * 3 + 2] - pts[last * 3 + 2];
          minDist[i] = Math.min(minDist[i], Math.sqrt(dx * dx + dy * dy + dz * dz));
        }
        for (const c of chosen) minDist[c] = -Infinity;
        let best = 0;
        for (let i = 1; i < n; i++) if (minDist[i] > minDist[best]) best = i;
        chosen.push(best);
      }
      expect([...got]).toEqual(chosen);
    }
  });

  it("validates its arguments the same way the Python side does", () => {
    const pts = randomPoints(4, 3, 1);
    expect(() => farthestPointSample(pts, 3, 4, 5, 0)).toThrow(
      "cannot pick 5 of 4 points",
    );
    expect(() => farthestPointSample(pts, 3, 4, 2, 4)).toThrow(
      "start index 4 out of range [0, 4)",
    );
  });

  it("selects exactly the same indices as the Python implementation", () => {
    const n = 300;
    const k = 32;
    const pts = randomPoints(n, 3, 7);
    const start = 11;
    const expected = pythonJson<number[]>(
      `
import json
import numpy as np
from xmad.preprocess import farthest_point_sample
pts = np.array(${JSON.stringify(toNested(pts, 3))}, dtype=np.float64)
print(json.dumps([int(v) for v in farthest_point_sample(pts, ${k}, start=${start})]))
`,
    );
    expect([...farthestPointSample(pts, 3, n, k, start)]).toEqual(expected);
  });
});

describe("nearest-neighbor grouping", () => {
  it("puts the center first and breaks ties by index", () => {
    // three coincident points: group around index 1 must list 1 first, then 0, 2
    const pts = new Float64Array([0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 9, 9, 9]);
    const groups = knnGroups(pts, 3, 4, new Int32Array([1]), 3);
    expect([...groups[0]]).toEqual([1, 0, 2]);
  });

  it("orders members by distance", () => {
    const pts = new Float64Array([0, 0, 3, 0, 1, 0, 2, 0]);
    const groups = knnGroups(pts, 2, 4, new Int32Array([0]), 4);
    expect([...groups[0]]).toEqual([0, 2, 3, 1]);
  });

  it("matches the Python grouping exactly", () => {
    const n = 200;
    const pts = randomPoints(n, 3, 21);
    const centers = new Int32Array([0, 5, 17, 42, 199]);
    const m = 16;
    const expected = pythonJson<number[][]>(
      `
import json
import numpy as np
from xmad.preprocess import knn_group
pts = np.array(${JSON.stringify(toNested(pts, 3))}, dtype=np.float64)
groups = knn_group(pts, [0, 5, 17, 42, 199], ${m})
print(json.dumps([[int(v) for v in g] for g in groups]))
`,
    );
    const got = knnGroups(pts, 3, n, centers, m).map((g) => [...g]);
    expect(got).toEqual(expected);
  });

  it("rejects group sizes larger than the point count", () => {
    expect(() => knnGroups(randomPoints(3, 3, 1), 3, 3, new Int32Array([0]), 4)).toThrow(
      "group size 4 exceeds point count 3",
    );
  });
});

describe("inverse-distance interpolation", () => {
  it("copies the sample exactly when a cell lands on it", () => {
    const positions = new Float64Array([1, 1, 0, 0]);
    const values = new Float64Array([5, -3, 7, 2]);
    const out = idwInterpolate(positions, values, 2, 3, 3, 2, 2.0);
    // cell (1,1) sits on sample 0, cell (0,0) on sample 1
    expect(out[(1 * 3 + 1) * 2]).toBe(5);
    expect(out[(1 * 3 + 1) * 2 + 1]).toBe(-3);
    expect(out[0]).toBe(7);
    expect(out[1]).toBe(2);
  });

  it("snaps to the lowest-index sample when several coincide", () => {
    const positions = new Float64Array([2, 2, 2, 2]);
    const values = new Float64Array([10, 99]);
    const out = idwInterpolate(positions, values, 1, 3, 3, 2, 2.0);
    expect(out[(2 * 3 + 2) * 1]).toBe(10);
  });

  it("blends inside the value range of its neighbors", () => {
    const positions = new Float64Array([0.3, 0.2, 3.7, 0.4, 0.1, 3.8, 3.9, 3.6]);
    const values = new Float64Array([1, 2, 3, 4]);
    const out = idwInterpolate(positions, values, 1, 4, 4, 4, 2.0);
    for (let i = 0; i < out.length; i++) {
      expect(out[i]).toBeGreaterThanOrEqual(1);
      expect(out[i]).toBeLessThanOrEqual(4);
    }
  });

  it("agrees with the Python interpolation to 1e-12", () => {
    const g = 40;
    const dim = 6;
    const rows = 12;
    const cols = 10;
    const rand = mulberry32(77);
    const positions = new Float64Array(g * 2);
    for (let i = 0; i < g; i++) {
      positions[i * 2] = rand() * (rows - 1);
      positions[i * 2 + 1] = rand() * (cols - 1);
    }
    // one position exactly on a cell to exercise the snap path too
    positions[0] = 4;
    positions[1] = 5;
    const values = new Float64Array(g * dim);
    for (let i = 0; i < values.length; i++) values[i] = rand() * 2 - 1;

    const expected = pythonJson<number[]>(
      `
import json
import numpy as np
from xmad.preprocess import idw_interpolate
pos = np.array(${JSON.stringify(toNested(positions, 2))}, dtype=np.float64)
vals = np.array(${JSON.stringify(toNested(values, dim))}, dtype=np.float64)
out = idw_interpolate(pos, vals, (${rows}, ${cols}), k=4, power=2.0)
print(json.dumps([float(v) for v in out.reshape(-1)]))
`,
    );
    const got = idwInterpolate(positions, values, dim, rows, cols, 4, 2.0);
    expect(got.length).toBe(expected.length);
    let worst = 0;
    for (let i = 0; i < got.length; i++) {
      worst = Math.max(worst, Math.abs(got[i] - expected[i]));
    }
    expect(worst).toBeLessThanOrEqual(1e-12);
  });

  it("rejects k outside [1, group count]", () => {
    const positions = new Float64Array([0, 0, 1, 1]);
    const values = new Float64Array([1, 2]);
    expect(() => idwInterpolate(positions, values, 1, 2, 2, 3, 2.0)).toThrow(/k=3/);
    expect(() => idwInterpolate(positions, values, 1, 2, 2, 0, 2.0)).toThrow(/k=0/);
  });
});

describe("grid position scaling", () => {
  it("maps half-pixel centers onto the coarser grid", () => {
    const coords = new Float64Array([0, 0, 223, 223]);
    const out = scaleGridPositions(coords, 224, 224, 112, 112);
    expect(out[0]).toBeCloseTo(-0.25, 12);
    expect(out[3]).toBeCloseTo(111.25, 12);
  });

  it("matches the Python mapping bit for bit", () => {
    const rand = mulberry32(3);
    const coords = new Float64Array(60);
    for (let i = 0; i < 30; i++) {
      coords[i * 2] = Math.floor(rand() * 48);
      coords[i * 2 + 1] = Math.floor(rand() * 48);
    }
    const expected = pythonJson<number[]>(
      `
import json
import numpy as np
from xmad.preprocess import scale_grid_positions
coords = np.array(${JSON.stringify(toNested(coords, 2))}, dtype=np.float64)
print(json.dumps([float(v) for v in scale_grid_positions(coords, (48, 48), (16, 16)).reshape(-1)]))
`,
    );
    const got = scaleGridPositions(coords, 48, 48, 16, 16);
    expect([...got]).toEqual(expected);
  });
});

describe("pooling", () => {
  it("averages 2x2 blocks", () => {
    const data = new Float64Array([1, 2, 3, 4]); // 2x2 grid, dim 1
    const out = avgPool2(data, 2, 2, 1);
    expect(out.length).toBe(1);
    expect(out[0]).toBe(2.5);
  });

  it("down2 of up2 reproduces the input exactly", () => {
    const rand = mulberry32(9);
    const data = new Float64Array(4 * 3 * 5);
    for (let i = 0; i < data.length; i++) data[i] = rand() * 20 - 10;
    const up = repeatUpsample(data, 4, 3, 5, 2);
    const down = avgPool2(up, 8, 6, 5);
    expect([...down]).toEqual([...data]);
  });

  it("repeats cells in blocks", () => {
    const data = new Float64Array([1, 2, 3, 4]); // 2x2, dim 1
    const up = repeatUpsample(data, 2, 2, 1, 2);
    expect([...up]).toEqual([1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
  });

  it("rejects odd shapes for down2", () => {
    expect(() => avgPool2(new Float64Array(3), 3, 1, 1)).toThrow(/even/);
  });
});
