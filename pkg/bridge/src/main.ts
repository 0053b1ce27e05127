/**
 * CLI entry point. Default transport is stdio (stdout carries protocol
 * bytes, logs go to stderr); --socket PORT serves one connection at a time
 * on TCP instead. Scale-out is one process per client.
 */

import { createServer } from "node:net";
import { parseArgs } from "node:util";

import { DenoiseServer } from "./server.js";

function usage(): never {
  process.stderr.write(
    "usage: denoise-bridge [--fallback identity|nlm] [--model model.json]\n" +
      "                      [--noise-policy exact_tau|nearest_trained_level]\n" +
      "                      [--levels 5,10,15] [--max-pixels N] [--socket PORT]\n"
  );
  process.exit(2);
}

export function configFromArgv(argv: string[]) {
  const { values } = parseArgs({
    args: argv,
    options: {
      fallback: { type: "string", default: "identity" },
      model: { type: "string" },
      "noise-policy": { type: "string", default: "exact_tau" },
      levels: { type: "string", default: "" },
      "max-pixels": { type: "string", default: String(1 << 22) },
      socket: { type: "string" },
    },
  });
  if (values.fallback !== "identity" && values.fallback !== "nlm") usage();
  const policy = values["noise-policy"];
  if (policy !== "exact_tau" && policy !== "nearest_trained_level") usage();
  const levels = values.levels
    ? values.levels.split(",").map((tok) => Number(tok) / 255)
    : [];
  if (levels.some((l) => !Number.isFinite(l) || l < 0)) usage();
  const maxPixels = Number(values["max-pixels"]);
  if (!Number.isInteger(maxPixels) || maxPixels < 1) usage();
  return {
    config: {
      modelPath: values.model,
      fallback: values.fallback,
      noisePolicy: policy,
      trainedLevels: levels,
      maxPixels,
    },
    socketPort: values.socket ? Number(values.socket) : null,
  } as const;
}

async function main(): Promise<void> {
  let parsed;
  try {
    parsed = configFromArgv(process.argv.slice(2));
  } catch {
    usage();
  }
  const server = new DenoiseServer(parsed.config);
  if (parsed.socketPort !== null) {
    const listener = createServer((conn) => {
      server
        .serve(conn, conn)
        .catch((err) => process.stderr.write(`connection error: ${err}\n`))
        .finally(() => conn.end());
    });
    listener.maxConnections = 1; // strictly serial service
    listener.listen(parsed.socketPort, () => {
      const addr = listener.address();
      const port = typeof addr === "object" && addr ? addr.port : parsed.socketPort;
      process.stderr.write(`listening on tcp port ${port}\n`);
    });
  } else {
    await server.serve(process.stdin, process.stdout);
  }
}

main().catch((err) => {
  process.stderr.write(`fatal: ${err}\n`);
  process.exit(1);
});
