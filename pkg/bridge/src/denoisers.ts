/**
 * Plane denoisers: identity stub, deterministic non-local means, and an
 * optional residual-CNN runner loaded through @tensorflow/tfjs when that
 * package is resolvable (weights are external artifacts, never bundled).
 */

import { createRequire } from "node:module";
import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";

export type Plane = Float64Array;

export function identityDenoise(plane: Plane): Plane {
  return plane.slice();
}

/**
 * Non-local means with a 3x3 patch and an 11x11 search window, replicated
 * borders. sigma is the noise standard deviation; the filtering bandwidth
 * scales with it. Fully deterministic.
 */
export function nlmDenoise(plane: Plane, height: number, width: number, sigma: number): Plane {
  const patchR = 1;
  const searchR = 5;
  const patchArea = (2 * patchR + 1) ** 2;
  const h2 = Math.max(0.6 * sigma, 1e-12) ** 2 * patchArea;
  const twoSigma2 = 2 * sigma * sigma;
  const out = new Float64Array(plane.length);
  const clamp = (v: number, lo: number, hi: number) => Math.min(Math.max(v, lo), hi);
  const at = (r: number, c: number) =>
    plane[clamp(r, 0, height - 1) * width + clamp(c, 0, width - 1)];

  for (let r = 0; r < height; r++) {
    for (let c = 0; c < width; c++) {
      let acc = 0;
      let wsum = 0;
      for (let dr = -searchR; dr <= searchR; dr++) {
        for (let dc = -searchR; dc <= searchR; dc++) {
          let dist = 0;
          for (let pr = -patchR; pr <= patchR; pr++) {
            for (let pc = -patchR; pc <= patchR; pc++) {
              const diff = at(r + pr, c + pc) - at(r + dr + pr, c + dc + pc);
              dist += diff * diff;
            }
          }
          dist /= patchArea;
          const w = Math.exp(-Math.max(dist - twoSigma2, 0) / h2);
          acc += w * at(r + dr, c + dc);
          wsum += w;
        }
      }
      out[r * width + c] = acc / wsum;
    }
  }
  return out;
}

export interface ResidualCnn {
  /** Denoise one plane; the network predicts the noise to subtract. */
  run(plane: Plane, height: number, width: number): Plane;
}

/**
 * Load a tfjs Layers model (model.json next to its weight shards) and wrap
 * it as a residual denoiser. Throws when @tensorflow/tfjs is not resolvable
 * or the artifacts are unreadable; callers degrade to the fallback then.
 */
export function loadResidualCnn(modelPath: string): ResidualCnn {
  const require = createRequire(join(process.cwd(), "noop.js"));
  const tf = require("@tensorflow/tfjs");
  const modelJson = JSON.parse(readFileSync(modelPath, "utf-8"));
  const dir = dirname(modelPath);
  const manifest = modelJson.weightsManifest ?? [];
  const weightSpecs: unknown[] = [];
  const shards: Buffer[] = [];
  for (const group of manifest) {
    weightSpecs.push(...group.weights);
    for (const path of group.paths) {
      shards.push(readFileSync(join(dir, path)));
    }
  }
  const weightData = Buffer.concat(shards);
  const handler = tf.io.fromMemory({
    modelTopology: modelJson.modelTopology,
    weightSpecs,
    weightData: weightData.buffer.slice(
      weightData.byteOffset,
      weightData.byteOffset + weightData.byteLength
    ),
  });
  let model: any = null;
  const ready = tf.loadLayersModel(handler).then((m: any) => {
    model = m;
  });
  return {
    run(plane: Plane, height: number, width: number): Plane {
      if (model === null) {
        // loadLayersModel resolves synchronously for in-memory handlers once
        // the microtask queue drains; force it if a caller raced the load
        throw new Error("model still loading; await warmup() first");
      }
      const input = tf.tensor4d(Float32Array.from(plane), [1, height, width, 1]);
      const residual = model.predict(input);
      const data = residual.dataSync();
      input.dispose();
      residual.dispose();
      const out = new Float64Array(plane.length);
      for (let i = 0; i < plane.length; i++) out[i] = plane[i] - data[i];
      return out;
    },
    // exposed for the server to await before serving
    warmup: () => ready,
  } as ResidualCnn & { warmup(): Promise<void> };
}

/** Pick the trained noise level (same units as sigma) nearest to sigma. */
export function nearestLevel(levels: readonly number[], sigma: number): number {
  if (levels.length === 0) throw new Error("no trained levels configured");
  let best = levels[0];
  for (const level of levels) {
    if (Math.abs(level - sigma) < Math.abs(best - sigma)) best = level;
  }
  return best;
}
