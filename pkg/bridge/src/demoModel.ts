/**
 * Tiny deterministic demo model for exercising the bridge end to end.
 *
 * Classifies a flattened 2x2 grayscale patch by the fraction of its values
 * strictly above 0.5: outputs [s, 1 - s] where s is that fraction, and the
 * "features" are simply the first four input values.  Mirrors the Python
 * reference stub used by the toolkit's own subprocess-adapter tests, so the
 * two ends of the wire can be replayed against the same golden transcript.
 */

import type { ModelFn, ModelInfo, PredictResult } from "./bridge.js";

export const DEMO_INFO: ModelInfo = {
  name: "demo-threshold",
  task: "classification",
  num_classes: 2,
  feature_dim: 4,
  input_dims: [2, 2, 1],
};

export const demoModel: ModelFn = (inputs, wantFeatures): PredictResult => {
  const outputs = inputs.map((row) => {
    const hot = row.filter((v) => v > 0.5).length;
    const s = row.length === 0 ? 0 : hot / row.length;
    return [s, 1 - s];
  });
  if (!wantFeatures) {
    return { outputs };
  }
  return { outputs, features: inputs.map((row) => row.slice(0, 4)) };
};
