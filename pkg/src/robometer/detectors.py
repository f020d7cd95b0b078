"""Weak-point detectors and their evaluation harness.

Two detectors are provided.  The black-box one needs nothing but model
predictions: it calibrates a prediction-diversity threshold on a profiled
dataset (the largest diversity value seen among calibration weak points) and
flags a fresh input as weak unless its diversity exceeds that threshold.  The
white-box one trains a small dense classifier on penultimate-layer features
to predict the weak/strong label directly.

Both are compared against two baselines — random selection of the same
number of points, and a top-1-confidence cutoff — through a shared
precision/recall/F1 harness.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model_iface, nn, robustness
from ._rng import Stream

DEFAULT_M_B = 50

# label convention for the white-box detector: class 1 = weak, class 0 = strong
WEAK_CLASS = 1

# candidate confidence cutoffs for the top-1 baseline: 0.05, 0.10, ..., 0.95
CONFIDENCE_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))

WMODEL_HIDDEN = (256, 128, 64)


def calibration_digest(profile: robustness.RobustnessProfile) -> str:
    """Short fingerprint of the per-point (accuracy, diversity) records."""
    rows = [
        [p.point_index, p.neighbor_accuracy, p.diversity_lambda]
        for p in profile.points
    ]
    blob = json.dumps(rows, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class BThreshold:
    cutoff_used: float
    lambda_threshold: float
    m_b: int
    calibration_digest: str
    no_weak_points: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lambda_threshold <= 1.0:
            raise ValueError(
                f"lambda_threshold must be in [0, 1], got {self.lambda_threshold}"
            )
        if not 0.0 < self.cutoff_used <= 1.0:
            raise ValueError(f"cutoff_used must be in (0, 1], got {self.cutoff_used}")
        if self.m_b < 1:
            raise ValueError(f"m_b must be >= 1, got {self.m_b}")

    def to_dict(self) -> dict:
        return {
            "cutoff_used": self.cutoff_used,
            "lambda_threshold": self.lambda_threshold,
            "m_b": self.m_b,
            "calibration_digest": self.calibration_digest,
            "no_weak_points": self.no_weak_points,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BThreshold":
        return cls(
            cutoff_used=float(payload["cutoff_used"]),
            lambda_threshold=float(payload["lambda_threshold"]),
            m_b=int(payload["m_b"]),
            calibration_digest=str(payload["calibration_digest"]),
            no_weak_points=bool(payload.get("no_weak_points", False)),
        )


def save_bthreshold(threshold: BThreshold, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(threshold.to_dict(), fh, indent=2)
        fh.write("\n")


def load_bthreshold(path) -> BThreshold:
    with open(path, "r", encoding="utf-8") as fh:
        return BThreshold.from_dict(json.load(fh))


def calibrate_b(
    profile: robustness.RobustnessProfile,
    cutoff: float,
    m_b: int = DEFAULT_M_B,
) -> BThreshold:
    """Pick the diversity threshold: the max diversity among calibration weak points.

    Every calibration weak point then satisfies lambda <= threshold, so recall
    on the calibration set itself is 1 by construction.  When the calibration
    set has no weak points at all the threshold degenerates to 0 (everything
    is later called strong) and ``no_weak_points`` is set; a warning is
    emitted because such a threshold carries no information.
    """
    if profile.task != "classification":
        raise ValueError("diversity threshold calibration needs a classification profile")
    if any(p.diversity_lambda is None for p in profile.points):
        raise ValueError("profile lacks diversity values")
    labeling = robustness.label_points(profile, cutoff)
    weak_lambdas = [
        p.diversity_lambda
        for p, is_weak in zip(profile.points, labeling.weak_flags)
        if is_weak
    ]
    if not weak_lambdas:
        warnings.warn(
            "no weak points at cutoff %g; threshold 0 classifies everything strong"
            % cutoff
        )
        return BThreshold(
            cutoff_used=cutoff,
            lambda_threshold=0.0,
            m_b=m_b,
            calibration_digest=calibration_digest(profile),
            no_weak_points=True,
        )
    return BThreshold(
        cutoff_used=cutoff,
        lambda_threshold=max(weak_lambdas),
        m_b=m_b,
        calibration_digest=calibration_digest(profile),
    )


@dataclass(frozen=True)
class BDetection:
    is_weak: bool
    diversity_lambda: float


def detect_b(
    adapter,
    image: np.ndarray,
    threshold: BThreshold,
    stream: Stream,
    recipe: str = "spatial",
) -> BDetection:
    """Black-box detection: resample fresh neighbors, call the point strong
    iff its prediction diversity strictly exceeds the calibrated threshold.

    Fresh sampling means repeated calls with different streams may disagree
    near the threshold; pass the same stream state to reproduce a decision.
    """
    info = model_iface.handshake(adapter)
    if info.task != "classification":
        raise ValueError("black-box detection needs a classification model")
    neighbors = robustness.generate_neighbors(image, threshold.m_b, stream, recipe)
    batch = np.stack([image] + [img for _, img in neighbors])
    predictions = model_iface.predict_batch(adapter, batch)
    classes = [p.predicted_class() for p in predictions]
    lam = robustness.simpson_lambda(classes, info.num_classes)
    return BDetection(is_weak=not lam > threshold.lambda_threshold, diversity_lambda=lam)


def detect_b_dataset(
    adapter,
    images: np.ndarray,
    threshold: BThreshold,
    seed: int,
    recipe: str = "spatial",
    threads: int = 1,
) -> List[BDetection]:
    """Run detect_b over every point with per-point seeded streams.

    Point i always uses the stream derived from (seed, i), so results do not
    depend on the worker count.
    """
    from ._rng import point_stream

    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")

    def one(i: int) -> BDetection:
        return detect_b(adapter, images[i], threshold, point_stream(seed, i), recipe)

    indices = range(images.shape[0])
    if threads == 1:
        return [one(i) for i in indices]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, indices))


@dataclass(frozen=True)
class WModel:
    """Feature-space weak-point classifier; class 1 is "weak"."""

    net: nn.DenseNet

    def __post_init__(self):
        if self.net.output_dim != 2:
            raise ValueError(
                f"weak-point classifier must have 2 outputs, got {self.net.output_dim}"
            )
        if self.net.head != "softmax":
            raise ValueError("weak-point classifier must use the softmax head")

    @property
    def input_dim(self) -> int:
        return self.net.input_dim


def wmodel_layer_sizes(input_dim: int) -> List[int]:
    return [input_dim, *WMODEL_HIDDEN, 2]


def train_w(
    features: np.ndarray,
    weak_flags: Sequence[bool],
    config: Optional[nn.TrainConfig] = None,
) -> WModel:
    """Train the feature-space detector on (feature, weak?) pairs.

    Labels are class-weighted during training since weak points are usually
    the minority.  Deterministic for a fixed config seed.
    """
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError(f"features must be N x D, got shape {features.shape}")
    if len(weak_flags) != features.shape[0]:
        raise ValueError("one weak flag per feature row required")
    labels = np.asarray([WEAK_CLASS if w else 1 - WEAK_CLASS for w in weak_flags],
                        dtype=np.uint32)
    if len(np.unique(labels)) < 2:
        raise ValueError("training labels contain a single class; need both weak and strong examples")
    if config is None:
        config = nn.TrainConfig()
    net = nn.init(wmodel_layer_sizes(features.shape[1]), seed=config.seed)
    trained = nn.train(net, features, labels, config)
    return WModel(net=trained)


def save_wmodel(wmodel: WModel, path) -> None:
    nn.save_model(wmodel.net, path)


def load_wmodel(path) -> WModel:
    return WModel(net=nn.load_model(path))


@dataclass(frozen=True)
class WDetection:
    is_weak: bool
    weak_probability: float


def detect_w(wmodel: WModel, feature: np.ndarray) -> WDetection:
    """Weak iff the weak-class probability reaches 0.5 (boundary counts as weak)."""
    feature = np.asarray(feature, dtype=np.float32)
    if feature.ndim != 1 or feature.shape[0] != wmodel.input_dim:
        raise ValueError(
            f"feature must be a vector of length {wmodel.input_dim}, got shape {feature.shape}"
        )
    outputs, _ = nn.forward(wmodel.net, feature[None, :])
    prob = float(outputs[0, WEAK_CLASS])
    return WDetection(is_weak=prob >= 0.5, weak_probability=prob)


def detect_w_batch(
    wmodel: WModel, features: np.ndarray
) -> Tuple[List[bool], List[float]]:
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[1] != wmodel.input_dim:
        raise ValueError(
            f"features must be N x {wmodel.input_dim}, got shape {features.shape}"
        )
    outputs, _ = nn.forward(wmodel.net, features)
    probs = [float(v) for v in outputs[:, WEAK_CLASS]]
    return [p >= 0.5 for p in probs], probs


def baseline_random(n_detected: int, n_total: int, stream: Stream) -> List[int]:
    """Uniform sample of exactly n_detected point indices, without replacement."""
    if n_detected < 0:
        raise ValueError(f"n_detected must be >= 0, got {n_detected}")
    if n_detected > n_total:
        raise ValueError(f"cannot detect {n_detected} of {n_total} points")
    return sorted(stream.sample_without_replacement(n_total, n_detected))


def baseline_top1(confidences: Sequence[float], conf_cutoff: float) -> List[int]:
    """Indices whose top-1 confidence falls strictly below the cutoff."""
    for c in confidences:
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"confidence out of [0, 1]: {c}")
    return [i for i, c in enumerate(confidences) if c < conf_cutoff]


def choose_confidence_cutoff(
    confidences: Sequence[float],
    weak_flags: Sequence[bool],
    grid: Sequence[float] = CONFIDENCE_GRID,
) -> Tuple[float, float]:
    """Grid-search the top-1 baseline cutoff, maximizing F1 against the given
    labels.  First grid value wins ties, so the result is deterministic."""
    if len(confidences) != len(weak_flags):
        raise ValueError("confidences and weak flags must align")
    truth = {i for i, w in enumerate(weak_flags) if w}
    best_cutoff, best_f1 = grid[0], -1.0
    for cutoff in grid:
        detected = set(baseline_top1(confidences, cutoff))
        report = evaluate(detected, truth, len(confidences), detector="top1")
        if report.f1 > best_f1:
            best_cutoff, best_f1 = cutoff, report.f1
    return best_cutoff, best_f1


@dataclass(frozen=True)
class EvalReport:
    detector: str
    precision: float
    recall: float
    f1: float
    n_truth: int
    n_detected: int
    n_hit: int
    n_total: int
    cutoff: Optional[float] = None
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        # field order is fixed so serialized reports diff cleanly
        out = {
            "detector": self.detector,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "n_truth": self.n_truth,
            "n_detected": self.n_detected,
            "n_hit": self.n_hit,
            "n_total": self.n_total,
        }
        if self.cutoff is not None:
            out["cutoff"] = self.cutoff
        if self.seed is not None:
            out["seed"] = self.seed
        return out


def evaluate(
    detected,
    truth,
    n_total: int,
    detector: str = "",
    cutoff: Optional[float] = None,
    seed: Optional[int] = None,
) -> EvalReport:
    """Precision/recall/F1 of a detected index set against the true weak set.

    Empty detected set means precision 0 (not NaN); empty truth means recall
    0; F1 is 0 whenever there are no hits.  All three land in [0, 1].
    """
    detected = set(int(i) for i in detected)
    truth = set(int(i) for i in truth)
    for s in (detected, truth):
        for i in s:
            if not 0 <= i < n_total:
                raise ValueError(f"point index {i} outside dataset of {n_total}")
    hit = len(detected & truth)
    precision = hit / len(detected) if detected else 0.0
    recall = hit / len(truth) if truth else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(
        detector=detector,
        precision=precision,
        recall=recall,
        f1=f1,
        n_truth=len(truth),
        n_detected=len(detected),
        n_hit=hit,
        n_total=n_total,
        cutoff=cutoff,
        seed=seed,
    )
