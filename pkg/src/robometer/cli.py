"""Command-line surface: dataset generation, model training, profiling,
analysis, detector calibration/application, and evaluation.

Every subcommand writes its reports under ``--out`` with a provenance block
(tool version, subcommand, full configuration, seeds) sufficient to
reproduce the run's content.  The worker-thread count and the output
location are deliberately left out of provenance: outputs are guaranteed
byte-identical across thread counts and across output directories, so
neither is part of a run's identity.

Errors leave on stderr as one line, ``error[CODE]: text``, with a nonzero
exit status.  ``ROBOMETER_LOG`` (DEBUG/INFO/WARNING/ERROR) controls log
verbosity; logs go to stderr only.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shlex
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__, detectors, featstats, model_iface, nn, robustness, tensorpack
from ._rng import Stream, point_stream

log = logging.getLogger("robometer")

# machine-parsable failure codes (the text after them is for humans)
E_USAGE = "E_USAGE"
E_MISSING_ARTIFACT = "E_MISSING_ARTIFACT"
E_BAD_ARTIFACT = "E_BAD_ARTIFACT"
E_MODEL = "E_MODEL"

_RECIPE_FLAGS = {"spatial": "spatial", "rain-fog": "rain_fog_mix",
                 "rain_fog_mix": "rain_fog_mix"}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _configure_logging():
    level_name = os.environ.get("ROBOMETER_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(E_MISSING_ARTIFACT, f"{what} not found: {p}")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(command: str, args, extra: Optional[dict] = None) -> dict:
    # threads and the output location are excluded: neither is part of a
    # run's identity (outputs are guaranteed identical across both)
    config = {
        k: v for k, v in sorted(vars(args).items())
        if k not in ("func", "threads", "out") and v is not None
    }
    block = {
        "tool_version": __version__,
        "command": command,
        "config": config,
    }
    if extra:
        block.update(extra)
    return block


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _open_adapter(spec: str, input_dims=None):
    """--model accepts a built-in model file or ``exec:<command line>``."""
    if spec.startswith("exec:"):
        command = shlex.split(spec[len("exec:"):])
        if not command:
            raise CliError(E_USAGE, "empty exec: command line")
        return model_iface.SubprocessAdapter(command)
    path = _require_file(spec, "model file")
    try:
        net = nn.load_model(path)
    except nn.ModelFormatError as exc:
        raise CliError(E_BAD_ARTIFACT, f"cannot load model {path}: {exc}")
    try:
        return model_iface.BuiltinAdapter(net, name=path.stem,
                                          input_dims=input_dims)
    except ValueError as exc:
        raise CliError(E_BAD_ARTIFACT, f"model {path} does not fit the data: {exc}")


def _load_data(args) -> tuple:
    manifest_path = _require_file(args.data, "dataset manifest")
    try:
        return tensorpack.load_dataset(manifest_path)
    except tensorpack.TensorPackError as exc:
        raise CliError(E_BAD_ARTIFACT, f"cannot load dataset {manifest_path}: {exc}")


def _load_profile_dir(path) -> robustness.RobustnessProfile:
    base = Path(path)
    jsonl = base / "profile.jsonl" if base.is_dir() else base
    meta = jsonl.with_name("profile_meta.json")
    _require_file(jsonl, "profile")
    _require_file(meta, "profile metadata")
    try:
        return robustness.load_profile(jsonl, meta)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(E_BAD_ARTIFACT, f"cannot load profile {jsonl}: {exc}")


# --- subcommands ------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    manifest = tensorpack.generate_synthetic_dataset(
        n_points=args.points,
        image_side=args.image_side,
        n_classes=args.classes,
        ambiguity_fraction=args.blended_fraction,
        seed=args.seed,
        out_dir=out,
    )
    _write_json(out / "gen_data_report.json", {
        "provenance": _provenance("gen-data", args),
        "manifest": str(out / "manifest.json"),
        "n_points": args.points,
        "n_classes": manifest.num_classes,
    })
    print(out / "manifest.json")
    return 0


def cmd_train_model(args) -> int:
    out = _out_dir(args)
    manifest, images, targets = _load_data(args)
    flat = images.reshape(images.shape[0], -1)
    if args.augment > 0:
        # dataset-level augmentation: extra transformed copies, same labels
        extra_images, extra_targets = [], []
        for i in range(images.shape[0]):
            stream = point_stream(args.seed, i)
            for _, neighbor in robustness.generate_neighbors(
                    images[i], args.augment, stream, _RECIPE_FLAGS[args.recipe]):
                extra_images.append(neighbor.reshape(-1))
                extra_targets.append(targets[i])
        flat = np.vstack([flat, np.array(extra_images, dtype=np.float32)])
        targets = np.concatenate([targets, np.array(extra_targets, dtype=targets.dtype)])
    hidden = [int(h) for h in args.hidden.split(",") if h]
    if manifest.task == "classification":
        layer_sizes = [flat.shape[1], *hidden, manifest.num_classes]
        head = "softmax"
    else:
        layer_sizes = [flat.shape[1], *hidden, 1]
        head = "linear"
    config = nn.TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        seed=args.seed,
    )
    net = nn.init(layer_sizes, seed=args.seed, head=head)
    trained = nn.train(net, flat, targets, config)
    model_path = out / "model.bin"
    nn.save_model(trained, model_path)
    outputs, _ = nn.forward(trained, flat)
    if manifest.task == "classification":
        fit = nn.macro_f1(targets, outputs.argmax(axis=1), manifest.num_classes)
        fit_name = "train_macro_f1"
    else:
        fit = float(np.mean((outputs[:, 0] - targets) ** 2))
        fit_name = "train_mse"
    _write_json(out / "train_model_report.json", {
        "provenance": _provenance("train-model", args),
        "model": str(model_path),
        "layer_sizes": layer_sizes,
        "n_train": int(flat.shape[0]),
        fit_name: fit,
    })
    print(model_path)
    return 0


def _histogram_csv(path: Path, counts: List[int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for i, count in enumerate(counts):
            writer.writerow([f"{i / 20:.2f}", f"{(i + 1) / 20:.2f}", count])


def cmd_profile(args) -> int:
    out = _out_dir(args)
    manifest, images, targets = _load_data(args)
    with _adapter_scope(args.model, manifest.image_dims) as adapter:
        profile = robustness.profile_dataset(
            adapter, images, targets,
            m=args.neighbors,
            seed=args.seed,
            recipe=_RECIPE_FLAGS[args.recipe],
            epsilon=args.epsilon,
            threads=args.threads,
            dataset_id=str(Path(args.data)),
        )
    meta = robustness.profile_meta(profile)
    meta["provenance"] = _provenance("profile", args)
    robustness.save_profile(profile, out / "profile.jsonl")
    _write_json(out / "profile_meta.json", meta)
    accuracies = [p.neighbor_accuracy for p in profile.points]
    _histogram_csv(out / "accuracy_histogram.csv", featstats.histogram20(accuracies))
    print(out / "profile.jsonl")
    return 0


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    profile = _load_profile_dir(args.profile)
    manifest, images, _ = _load_data(args)
    with _adapter_scope(args.model, manifest.image_dims) as adapter:
        features = robustness.extract_features(adapter, images)
    test_profile = _load_profile_dir(args.test_profile) if args.test_profile else None
    other_profile = _load_profile_dir(args.other_profile) if args.other_profile else None
    report = featstats.analyze(
        profile, features, args.cutoff,
        test_profile=test_profile,
        other_profile=other_profile,
        metric=args.metric,
    )
    per_point_r = report.pop("per_point_r")
    report["provenance"] = _provenance("analyze", args)
    _write_json(out / "analysis.json", report)
    with open(out / "boundary_ratios.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "boundary_ratio"])
        for i, r in enumerate(per_point_r):
            writer.writerow([i, repr(float(r))])
    print(out / "analysis.json")
    return 0


def cmd_calibrate_b(args) -> int:
    out = _out_dir(args)
    profile = _load_profile_dir(args.profile)
    try:
        threshold = detectors.calibrate_b(profile, args.cutoff, m_b=args.neighbors_b)
    except ValueError as exc:
        raise CliError(E_BAD_ARTIFACT, str(exc))
    payload = threshold.to_dict()
    payload["provenance"] = _provenance("calibrate-b", args)
    _write_json(out / "bthreshold.json", payload)
    print(out / "bthreshold.json")
    return 0


def cmd_detect_b(args) -> int:
    out = _out_dir(args)
    threshold_path = _require_file(args.threshold, "diversity threshold artifact")
    try:
        threshold = detectors.load_bthreshold(threshold_path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(E_BAD_ARTIFACT, f"cannot load threshold {threshold_path}: {exc}")
    manifest, images, _ = _load_data(args)
    with _adapter_scope(args.model, manifest.image_dims) as adapter:
        results = detectors.detect_b_dataset(
            adapter, images, threshold,
            seed=args.seed,
            recipe=_RECIPE_FLAGS[args.recipe],
            threads=args.threads,
        )
    with open(out / "detections_b.jsonl", "w", encoding="utf-8") as fh:
        for i, det in enumerate(results):
            fh.write(json.dumps(
                {"index": i, "diversity_lambda": det.diversity_lambda,
                 "weak": det.is_weak},
                separators=(",", ":")) + "\n")
    _write_json(out / "detect_b_meta.json", {
        "provenance": _provenance("detect-b", args),
        "threshold": threshold.to_dict(),
        "n_points": len(results),
        "n_weak": sum(d.is_weak for d in results),
    })
    print(out / "detections_b.jsonl")
    return 0


def cmd_train_w(args) -> int:
    out = _out_dir(args)
    profile = _load_profile_dir(args.profile)
    manifest, images, _ = _load_data(args)
    with _adapter_scope(args.model, manifest.image_dims) as adapter:
        try:
            features = robustness.extract_features(adapter, images)
        except ValueError as exc:
            raise CliError(E_MODEL, str(exc))
    labeling = robustness.label_points(profile, args.cutoff)
    try:
        wmodel = detectors.train_w(
            features, labeling.weak_flags,
            nn.TrainConfig(seed=args.seed, max_epochs=args.epochs,
                           batch_size=args.batch_size),
        )
    except ValueError as exc:
        raise CliError(E_BAD_ARTIFACT, str(exc))
    wmodel_path = out / "wmodel.bin"
    detectors.save_wmodel(wmodel, wmodel_path)
    detected, _ = detectors.detect_w_batch(wmodel, features)
    report = detectors.evaluate(
        {i for i, w in enumerate(detected) if w},
        set(labeling.weak_indices()),
        features.shape[0],
        detector="feature-classifier-train",
        cutoff=args.cutoff,
        seed=args.seed,
    )
    _write_json(out / "train_w_report.json", {
        "provenance": _provenance("train-w", args),
        "wmodel": str(wmodel_path),
        "training_fit": report.to_dict(),
    })
    print(wmodel_path)
    return 0


def cmd_detect_w(args) -> int:
    out = _out_dir(args)
    wmodel_path = _require_file(args.wmodel, "feature-classifier artifact")
    try:
        wmodel = detectors.load_wmodel(wmodel_path)
    except (nn.ModelFormatError, ValueError) as exc:
        raise CliError(E_BAD_ARTIFACT, f"cannot load detector {wmodel_path}: {exc}")
    manifest, images, _ = _load_data(args)
    with _adapter_scope(args.model, manifest.image_dims) as adapter:
        try:
            features = robustness.extract_features(adapter, images)
        except ValueError as exc:
            raise CliError(E_MODEL, str(exc))
    try:
        flags, probs = detectors.detect_w_batch(wmodel, features)
    except ValueError as exc:
        raise CliError(E_BAD_ARTIFACT, str(exc))
    with open(out / "detections_w.jsonl", "w", encoding="utf-8") as fh:
        for i, (weak, prob) in enumerate(zip(flags, probs)):
            fh.write(json.dumps(
                {"index": i, "weak_probability": prob, "weak": weak},
                separators=(",", ":")) + "\n")
    _write_json(out / "detect_w_meta.json", {
        "provenance": _provenance("detect-w", args),
        "n_points": len(flags),
        "n_weak": sum(flags),
    })
    print(out / "detections_w.jsonl")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    profile = _load_profile_dir(args.profile)
    labeling = robustness.label_points(profile, args.cutoff)
    truth = set(labeling.weak_indices())
    n_total = len(profile.points)
    manifest, images, _ = _load_data(args)
    reports = []
    top1_info = None
    with _adapter_scope(args.model, manifest.image_dims) as adapter:
        if args.threshold:
            threshold_path = _require_file(args.threshold, "diversity threshold artifact")
            try:
                threshold = detectors.load_bthreshold(threshold_path)
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                raise CliError(E_BAD_ARTIFACT,
                               f"cannot load threshold {threshold_path}: {exc}")
            detections = detectors.detect_b_dataset(
                adapter, images, threshold,
                seed=args.seed,
                recipe=_RECIPE_FLAGS[args.recipe],
                threads=args.threads,
            )
            detected_b = {i for i, d in enumerate(detections) if d.is_weak}
            reports.append(detectors.evaluate(
                detected_b, truth, n_total, detector="diversity-threshold",
                cutoff=args.cutoff, seed=args.seed))
            reports.append(detectors.evaluate(
                set(detectors.baseline_random(
                    len(detected_b), n_total, Stream(args.seed))),
                truth, n_total, detector="random-matched-to-diversity",
                cutoff=args.cutoff, seed=args.seed))
        if args.wmodel:
            wmodel_path = _require_file(args.wmodel, "feature-classifier artifact")
            try:
                wmodel = detectors.load_wmodel(wmodel_path)
            except (nn.ModelFormatError, ValueError) as exc:
                raise CliError(E_BAD_ARTIFACT,
                               f"cannot load detector {wmodel_path}: {exc}")
            try:
                features = robustness.extract_features(adapter, images)
                flags, _ = detectors.detect_w_batch(wmodel, features)
            except ValueError as exc:
                raise CliError(E_MODEL, str(exc))
            detected_w = {i for i, w in enumerate(flags) if w}
            reports.append(detectors.evaluate(
                detected_w, truth, n_total, detector="feature-classifier",
                cutoff=args.cutoff, seed=args.seed))
            reports.append(detectors.evaluate(
                set(detectors.baseline_random(
                    len(detected_w), n_total, Stream(args.seed + 1))),
                truth, n_total, detector="random-matched-to-feature",
                cutoff=args.cutoff, seed=args.seed))
        if not args.threshold and not args.wmodel:
            raise CliError(E_USAGE, "eval needs --threshold and/or --wmodel")
        predictions = model_iface.predict_batch(adapter, images)
        confidences = [p.top1_confidence for p in predictions]
    conf_cutoff, grid_f1 = detectors.choose_confidence_cutoff(
        confidences, labeling.weak_flags)
    reports.append(detectors.evaluate(
        set(detectors.baseline_top1(confidences, conf_cutoff)),
        truth, n_total, detector="top1-confidence",
        cutoff=conf_cutoff, seed=args.seed))
    top1_info = {"grid_cutoff": conf_cutoff, "grid_f1": grid_f1,
                 "calibrated_on": "eval profile points"}
    _write_json(out / "eval_report.json", {
        "provenance": _provenance("eval", args),
        "cutoff": args.cutoff,
        "n_total": n_total,
        "n_weak_truth": len(truth),
        "top1_calibration": top1_info,
        "detectors": [r.to_dict() for r in reports],
    })
    print(out / "eval_report.json")
    return 0


class _adapter_scope:
    """Context manager closing subprocess adapters; builtin ones are no-ops."""

    def __init__(self, spec: str, input_dims=None):
        self.spec = spec
        self.input_dims = input_dims
        self.adapter = None

    def __enter__(self):
        self.adapter = _open_adapter(self.spec, self.input_dims)
        return self.adapter

    def __exit__(self, *exc):
        close = getattr(self.adapter, "close", None)
        if close is not None:
            close()
        return False


# --- argument wiring --------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, *, model=False, data=False,
                seed=True, threads=False, recipe=False, cutoff=False):
    parser.add_argument("--out", required=True, help="output directory")
    if seed:
        parser.add_argument("--seed", type=int, default=0,
                            help="master seed; all randomness derives from it")
    if model:
        parser.add_argument("--model", required=True,
                            help="built-in model file, or exec:<command line> "
                                 "for an external process speaking the NDJSON "
                                 "protocol")
    if data:
        parser.add_argument("--data", required=True, help="dataset manifest JSON")
    if threads:
        parser.add_argument("--threads", type=int, default=1,
                            help="worker threads (outputs are identical for "
                                 "any value)")
    if recipe:
        parser.add_argument("--recipe", choices=sorted(_RECIPE_FLAGS),
                            default="spatial", help="neighbor transform family")
    if cutoff:
        parser.add_argument("--cutoff", type=float, default=0.75,
                            help="neighbor-accuracy cutoff separating weak "
                                 "from strong (typically 0.5 or 0.75)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robometer",
        description="Per-input robustness profiling and weak-point detection "
                    "for classifiers and regressors.",
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic labeled image set")
    _add_common(p)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--blended-fraction", type=float, default=0.3,
                   help="fraction of points drawn as two-class blends")
    p.add_argument("--image-side", type=int, default=24)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-model", help="train a built-in dense model on a manifest")
    _add_common(p, data=True, recipe=True)
    p.add_argument("--hidden", default="64,32",
                   help="comma-separated hidden layer widths")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--augment", type=int, default=0,
                   help="extra transformed copies per training image")
    p.set_defaults(func=cmd_train_model)

    p = sub.add_parser("profile", help="profile per-point robustness over a dataset")
    _add_common(p, model=True, data=True, threads=True, recipe=True)
    p.add_argument("--neighbors", type=int, default=robustness.DEFAULT_M,
                   help="neighbors sampled per point")
    p.add_argument("--epsilon", type=float, default=None,
                   help="regression tolerance (defaults to 0.1 for regression "
                        "models)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("analyze", help="feature-space statistics of a profile")
    _add_common(p, model=True, data=True, cutoff=True)
    p.add_argument("--profile", required=True, help="profile directory or JSONL")
    p.add_argument("--metric", choices=featstats.METRICS, default="euclidean")
    p.add_argument("--test-profile", default=None,
                   help="optional second profile for the comparison histogram")
    p.add_argument("--other-profile", default=None,
                   help="optional same-data profile of another model")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("calibrate-b", help="fit the diversity threshold on a profile")
    _add_common(p, cutoff=True, seed=False)
    p.add_argument("--profile", required=True)
    p.add_argument("--neighbors-b", type=int, default=detectors.DEFAULT_M_B,
                   help="neighbors per point at detection time")
    p.set_defaults(func=cmd_calibrate_b)

    p = sub.add_parser("detect-b", help="apply the diversity-threshold detector")
    _add_common(p, model=True, data=True, threads=True, recipe=True)
    p.add_argument("--threshold", required=True, help="bthreshold.json artifact")
    p.set_defaults(func=cmd_detect_b)

    p = sub.add_parser("train-w", help="train the feature-space detector from a profile")
    _add_common(p, model=True, data=True, cutoff=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_train_w)

    p = sub.add_parser("detect-w", help="apply the feature-space detector")
    _add_common(p, model=True, data=True)
    p.add_argument("--wmodel", required=True, help="wmodel.bin artifact")
    p.set_defaults(func=cmd_detect_w)

    p = sub.add_parser("eval", help="score detectors and baselines against a profile")
    _add_common(p, model=True, data=True, threads=True, recipe=True, cutoff=True)
    p.add_argument("--profile", required=True,
                   help="profile supplying ground-truth weak labels")
    p.add_argument("--threshold", default=None, help="bthreshold.json artifact")
    p.add_argument("--wmodel", default=None, help="wmodel.bin artifact")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except model_iface.AdapterTimeout as exc:
        print(f"error[{E_MODEL}]: model timed out: {exc}", file=sys.stderr)
        return 3
    except (model_iface.ProtocolError, model_iface.AdapterError) as exc:
        print(f"error[{E_MODEL}]: {exc}", file=sys.stderr)
        return 3
    except tensorpack.TensorPackError as exc:
        print(f"error[{E_BAD_ARTIFACT}]: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error[{E_USAGE}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
