/**
 * Denoise server: reads framed requests from a stream, answers strictly in
 * order on another stream. Internal failures (oversized images, non-finite
 * samples, denoiser errors) become status=1 replies; a corrupted request
 * header gets a status=1 reply and then closes the stream, because framing
 * cannot be recovered.
 */

import type { Readable, Writable } from "node:stream";

import {
  DenoiseRequest,
  ProtocolError,
  decodeRequest,
  encodeErrorResponse,
  encodeOkResponse,
} from "./protocol.js";
import {
  Plane,
  ResidualCnn,
  identityDenoise,
  loadResidualCnn,
  nearestLevel,
  nlmDenoise,
} from "./denoisers.js";

export interface ServerConfig {
  modelPath?: string;
  fallback: "identity" | "nlm";
  noisePolicy: "exact_tau" | "nearest_trained_level";
  /** Trained noise levels as standard deviations (e.g. 10/255). */
  trainedLevels: number[];
  /** Maximum accepted pixel count per image. */
  maxPixels: number;
  log: (message: string) => void;
}

export const DEFAULT_CONFIG: ServerConfig = {
  fallback: "identity",
  noisePolicy: "exact_tau",
  trainedLevels: [],
  maxPixels: 1 << 22,
  log: (message) => process.stderr.write(message + "\n"),
};

export class DenoiseServer {
  private readonly config: ServerConfig;
  private model: (ResidualCnn & { warmup?(): Promise<void> }) | null = null;

  constructor(config: Partial<ServerConfig> = {}) {
    this.config = { ...DEFAULT_CONFIG, ...config };
    if (this.config.modelPath) {
      try {
        this.model = loadResidualCnn(this.config.modelPath);
      } catch (err) {
        this.config.log(
          `model ${this.config.modelPath} unavailable (${(err as Error).message}); ` +
            `falling back to ${this.config.fallback}`
        );
        this.model = null;
      }
    }
  }

  async ready(): Promise<void> {
    if (this.model?.warmup) await this.model.warmup();
  }

  /** Effective noise std handed to the denoiser for a requested tau. */
  pickSigma(tau: number): number {
    const sigma = Math.sqrt(Math.max(tau, 0));
    if (this.config.noisePolicy === "nearest_trained_level" && this.config.trainedLevels.length) {
      const level = nearestLevel(this.config.trainedLevels, sigma);
      this.config.log(`noise level: requested sigma=${sigma.toPrecision(4)} -> trained ${level}`);
      return level;
    }
    return sigma;
  }

  handleRequest(request: DenoiseRequest): Buffer {
    const { height, width, tau, real, imag } = request;
    const n = height * width;
    if (n === 0 || n > this.config.maxPixels) {
      return encodeErrorResponse(`image size ${height}x${width} outside [1, ${this.config.maxPixels}] pixels`);
    }
    const finite = (plane: Plane) => plane.every(Number.isFinite);
    if (!Number.isFinite(tau) || !finite(real) || !finite(imag)) {
      return encodeErrorResponse("request contains non-finite samples");
    }
    try {
      const sigma = this.pickSigma(tau);
      const denoise = (plane: Plane): Plane => {
        if (this.model) return this.model.run(plane, height, width);
        if (this.config.fallback === "nlm") return nlmDenoise(plane, height, width, sigma);
        return identityDenoise(plane);
      };
      return encodeOkResponse(denoise(real), denoise(imag));
    } catch (err) {
      return encodeErrorResponse(`denoiser failed: ${(err as Error).message}`);
    }
  }

  /** Serve until the input ends. Resolves when the peer disconnects. */
  async serve(input: Readable, output: Writable): Promise<void> {
    await this.ready();
    let pending: Buffer = Buffer.alloc(0);
    for await (const chunk of input) {
      pending = pending.length ? Buffer.concat([pending, chunk as Buffer]) : (chunk as Buffer);
      while (true) {
        let parsed;
        try {
          parsed = decodeRequest(pending);
        } catch (err) {
          if (err instanceof ProtocolError) {
            this.config.log(`protocol error: ${err.message}`);
            output.write(encodeErrorResponse(err.message));
            return; // framing lost; drop the connection
          }
          throw err;
        }
        if (parsed === null) break;
        pending = parsed.remaining;
        output.write(this.handleRequest(parsed.request));
      }
    }
  }
}
