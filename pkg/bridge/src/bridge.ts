/**
 * Line-delimited JSON bridge between a stdio harness and a model callable.
 *
 * Each request arrives as one JSON object per line on stdin and produces
 * exactly one JSON object per line on stdout.  Anything that is not a
 * complete JSON line never reaches stdout; diagnostics go to stderr only.
 *
 * Requests:
 *   {"op": "hello"}                       -> model info object
 *   {"id", "op": "predict", "shape",
 *    "inputs", "want_features"}           -> {"id", "outputs"[, "features"]}
 *   anything else                         -> {"id", "error": "unsupported op: <op>"}
 *
 * A line that fails to parse as JSON yields {"id": null, "error": "malformed
 * request"} and the session keeps serving.  Request ids are echoed back
 * verbatim.  Requests are handled one at a time, in arrival order.
 */

import { createInterface } from "node:readline";
import type { Readable, Writable } from "node:stream";

/** Static description a model hands to its harness on "hello". */
export interface ModelInfo {
  name: string;
  task: "classification" | "regression";
  num_classes: number;
  feature_dim: number;
  input_dims: [number, number, number];
}

/** One batch of work for the model: flattened rows, optional feature request. */
export interface PredictResult {
  outputs: number[][];
  features?: number[][];
}

/** The thing being served: a pure function from a batch to its outputs. */
export type ModelFn = (inputs: number[][], wantFeatures: boolean) => PredictResult;

interface PredictRequest {
  id?: unknown;
  op?: unknown;
  shape?: unknown;
  inputs?: unknown;
  want_features?: unknown;
}

function sameShape(shape: unknown, dims: [number, number, number]): boolean {
  return (
    Array.isArray(shape) &&
    shape.length === dims.length &&
    shape.every((v, i) => v === dims[i])
  );
}

/**
 * Process a single request line and return the reply line, or null for a
 * blank line (which produces no reply at all).
 *
 * Pure except for whatever the model function does, so tests can drive the
 * protocol without a child process.
 */
export function handleLine(line: string, model: ModelFn, info: ModelInfo): string | null {
  if (line.trim() === "") {
    return null;
  }

  let req: PredictRequest;
  try {
    req = JSON.parse(line) as PredictRequest;
  } catch {
    return JSON.stringify({ id: null, error: "malformed request" });
  }

  if (req.op === "hello") {
    return JSON.stringify(info);
  }

  const id = req.id === undefined ? null : req.id;
  if (req.op !== "predict") {
    return JSON.stringify({ id, error: `unsupported op: ${req.op}` });
  }

  if (!sameShape(req.shape, info.input_dims)) {
    return JSON.stringify({ id, error: "wrong shape" });
  }

  const inputs = req.inputs;
  if (!Array.isArray(inputs) || !inputs.every((row) => Array.isArray(row))) {
    return JSON.stringify({ id, error: "malformed request" });
  }

  const wantFeatures = req.want_features === true;
  let result: PredictResult;
  try {
    result = model(inputs as number[][], wantFeatures);
  } catch (err) {
    return JSON.stringify({ id, error: String(err instanceof Error ? err.message : err) });
  }

  if (wantFeatures && result.features !== undefined) {
    return JSON.stringify({ id, outputs: result.outputs, features: result.features });
  }
  return JSON.stringify({ id, outputs: result.outputs });
}

/**
 * Serve a model over a pair of streams until the input side closes.
 * Defaults to stdin/stdout; stderr is the only place anything else is said.
 */
export function serve(
  model: ModelFn,
  info: ModelInfo,
  input: Readable = process.stdin,
  output: Writable = process.stdout,
): Promise<void> {
  const rl = createInterface({ input, terminal: false });
  process.stderr.write(`bridge: serving ${info.name}\n`);
  return new Promise((resolve) => {
    rl.on("line", (line) => {
      const reply = handleLine(line, model, info);
      if (reply !== null) {
        output.write(reply + "\n");
      }
    });
    rl.on("close", () => {
      process.stderr.write("bridge: input closed, exiting\n");
      resolve();
    });
  });
}
