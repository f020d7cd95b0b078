"""Neighbor generation and per-point robustness profiling.

A point's *neighbors* are m transformed variants of its image.  The profile
records, per point, how often the model stays correct across the original
plus its neighbors (neighbor accuracy) and how concentrated the 1+m
predicted classes are (Simpson index λ).  Points below an accuracy cutoff
are *weak*.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._rng import Stream, point_stream
from . import transforms
from .transforms import TransformSpec, apply_transform
from .model_iface import handshake, predict_batch

RECIPES = ("spatial", "rain_fog_mix")

DEFAULT_M = 50
DEFAULT_EPSILON = 0.1
WEATHER_INTENSITY_RANGE = (0.2, 0.8)

REPORT_FIELDS = (
    "index",
    "label",
    "original_correct",
    "neighbor_accuracy",
    "diversity_lambda",
    "m",
    "transforms_digest",
)


@dataclasses.dataclass
class PointProfile:
    """Robustness record for one dataset point.

    ``neighbor_predictions`` holds all 1+m predictions with the original
    first: class ids for classification, correctness flags for regression.
    Reloaded report profiles carry ``None`` for the two bulky fields.
    """

    point_index: int
    label: float
    original_correct: bool
    neighbor_accuracy: float
    diversity_lambda: Optional[float]
    m: int
    transforms_digest: str
    neighbor_predictions: Optional[list] = None
    transform_specs: Optional[List[TransformSpec]] = None


@dataclasses.dataclass
class RobustnessProfile:
    model_name: str
    dataset_id: str
    task: str
    m: int
    seed: int
    recipe: str
    epsilon: Optional[float]
    points: List[PointProfile]


@dataclasses.dataclass
class WeakLabeling:
    cutoff: float
    weak_flags: List[bool]

    def weak_indices(self) -> List[int]:
        return [i for i, flag in enumerate(self.weak_flags) if flag]


def generate_neighbors(
    image: np.ndarray,
    m: int,
    stream: Stream,
    recipe: str = "spatial",
) -> List[Tuple[TransformSpec, np.ndarray]]:
    """Sample and apply m transforms; deterministic for a given stream.

    ``spatial`` draws independent rotation+translation specs.
    ``rain_fog_mix`` produces ⌈m/2⌉ rain then ⌊m/2⌋ fog neighbors with
    intensities ~ Uniform(0.2, 0.8).
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if recipe not in RECIPES:
        raise ValueError(f"recipe must be one of {RECIPES}, got {recipe!r}")
    h, w = image.shape[0], image.shape[1]
    lo, hi = WEATHER_INTENSITY_RANGE
    specs: List[TransformSpec] = []
    if recipe == "spatial":
        for _ in range(m):
            specs.append(transforms.sample_spatial(stream, w, h))
    else:
        for _ in range(math.ceil(m / 2)):
            density = stream.uniform(lo, hi)
            specs.append(
                TransformSpec(kind="rain", rain_density=density, rng_tag=stream.next_u64())
            )
        for _ in range(m // 2):
            specs.append(TransformSpec(kind="fog", fog_intensity=stream.uniform(lo, hi)))
    return [(spec, apply_transform(image, spec)) for spec in specs]


def classification_correct(prediction, true_label: int) -> bool:
    """Argmax (lowest index on ties) equals the label."""
    outputs = getattr(prediction, "outputs", prediction)
    return int(np.argmax(outputs)) == int(true_label)


def regression_correct(neighbor_output: float, original_output: float, epsilon: float) -> bool:
    """|neighbor − original| ≤ ε (closed interval).

    The reference is the model's own prediction on the original image, not a
    ground-truth target.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    return abs(float(neighbor_output) - float(original_output)) <= epsilon


def neighbor_accuracy(correct_flags: Sequence[bool]) -> float:
    """Fraction correct over the original + its m neighbors."""
    if len(correct_flags) == 0:
        raise ValueError("need at least one correctness flag")
    return float(sum(bool(f) for f in correct_flags)) / len(correct_flags)


def simpson_lambda(predicted_classes: Sequence[int], k: int) -> float:
    """λ = Σ (count_c / n)² over the 1+m predicted classes."""
    n = len(predicted_classes)
    if n == 0:
        raise ValueError("need at least one prediction")
    classes = np.asarray(predicted_classes, dtype=np.int64)
    if classes.min() < 0 or classes.max() >= k:
        raise ValueError(f"class ids must lie in [0, {k})")
    counts = np.bincount(classes, minlength=k)
    return float(np.sum((counts / n) ** 2))


def label_points(profile: RobustnessProfile, cutoff: float) -> WeakLabeling:
    """Weak ⇔ neighbor_accuracy < cutoff (strict)."""
    if not 0.0 < cutoff <= 1.0:
        raise ValueError(f"cutoff must be in (0, 1], got {cutoff}")
    return WeakLabeling(
        cutoff=cutoff,
        weak_flags=[p.neighbor_accuracy < cutoff for p in profile.points],
    )


def _digest(specs: Sequence[TransformSpec]) -> str:
    doc = json.dumps([s.to_dict() for s in specs], separators=(",", ":"), sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()[:12]


def profile_dataset(
    adapter,
    images: np.ndarray,
    labels: np.ndarray,
    m: int = DEFAULT_M,
    seed: int = 0,
    recipe: str = "spatial",
    epsilon: Optional[float] = None,
    threads: int = 1,
    dataset_id: str = "",
) -> RobustnessProfile:
    """Profile every dataset point against m sampled neighbors.

    Point i draws from its own stream seeded with ``seed XOR i``, so the
    result is identical no matter how many worker threads run.  Any adapter
    failure aborts the whole profile.
    """
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    info = handshake(adapter)
    images = np.asarray(images)
    n = images.shape[0]
    labels = np.asarray(labels)
    if labels.shape[0] != n:
        raise ValueError(f"{n} images but {labels.shape[0]} labels")
    classification = info.task == "classification"
    if classification and n:
        if labels.min() < 0 or labels.max() >= info.num_classes:
            raise ValueError(f"labels out of range for {info.num_classes} classes")
    eps = None
    if not classification:
        eps = DEFAULT_EPSILON if epsilon is None else float(epsilon)
        if eps <= 0:
            raise ValueError(f"epsilon must be > 0, got {eps}")

    originals = predict_batch(adapter, images)

    def profile_point(i: int) -> PointProfile:
        stream = point_stream(seed, i)
        pairs = generate_neighbors(images[i], m, stream, recipe)
        neighbor_imgs = np.stack([img for _, img in pairs])
        neighbor_preds = predict_batch(adapter, neighbor_imgs)
        specs = [spec for spec, _ in pairs]
        if classification:
            label = int(labels[i])
            classes = [originals[i].predicted_class()] + [
                p.predicted_class() for p in neighbor_preds
            ]
            flags = [c == label for c in classes]
            return PointProfile(
                point_index=i,
                label=label,
                original_correct=flags[0],
                neighbor_accuracy=neighbor_accuracy(flags),
                diversity_lambda=simpson_lambda(classes, info.num_classes),
                m=m,
                transforms_digest=_digest(specs),
                neighbor_predictions=classes,
                transform_specs=specs,
            )
        reference = originals[i].value()
        flags = [True] + [
            regression_correct(p.value(), reference, eps) for p in neighbor_preds
        ]
        return PointProfile(
            point_index=i,
            label=float(labels[i]),
            original_correct=True,
            neighbor_accuracy=neighbor_accuracy(flags),
            diversity_lambda=None,
            m=m,
            transforms_digest=_digest(specs),
            neighbor_predictions=flags,
            transform_specs=specs,
        )

    if threads == 1:
        points = [profile_point(i) for i in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(profile_point, range(n)))

    return RobustnessProfile(
        model_name=info.name,
        dataset_id=dataset_id,
        task=info.task,
        m=m,
        seed=seed,
        recipe=recipe,
        epsilon=eps,
        points=points,
    )


def extract_features(adapter, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Penultimate-layer features for every image, stacked N×D."""
    info = handshake(adapter)
    if info.feature_dim is None:
        raise ValueError(f"model {info.name!r} exposes no feature vectors")
    images = np.asarray(images)
    if images.shape[0] == 0:
        return np.zeros((0, info.feature_dim), dtype=np.float32)
    rows = []
    for start in range(0, images.shape[0], chunk):
        preds = predict_batch(adapter, images[start : start + chunk], want_features=True)
        rows.extend(p.features for p in preds)
    return np.stack(rows)


# --- report files -----------------------------------------------------------


def _point_record(p: PointProfile) -> dict:
    return {
        "index": p.point_index,
        "label": p.label,
        "original_correct": bool(p.original_correct),
        "neighbor_accuracy": p.neighbor_accuracy,
        "diversity_lambda": p.diversity_lambda,
        "m": p.m,
        "transforms_digest": p.transforms_digest,
    }


def profile_meta(profile: RobustnessProfile) -> dict:
    return {
        "model_name": profile.model_name,
        "dataset_id": profile.dataset_id,
        "task": profile.task,
        "m": profile.m,
        "seed": profile.seed,
        "recipe": profile.recipe,
        "epsilon": profile.epsilon,
    }


def save_profile(
    profile: RobustnessProfile,
    jsonl_path,
    meta_path=None,
    csv_path=None,
) -> None:
    """One JSON record per point; optional meta JSON and CSV mirror."""
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for p in profile.points:
            fh.write(json.dumps(_point_record(p), separators=(",", ":")) + "\n")
    if meta_path is not None:
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(profile_meta(profile), fh, indent=1)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(REPORT_FIELDS) + "\n")
            for p in profile.points:
                rec = _point_record(p)
                cells = [
                    "" if rec[k] is None else str(rec[k]) for k in REPORT_FIELDS
                ]
                fh.write(",".join(cells) + "\n")


def load_profile(jsonl_path, meta_path) -> RobustnessProfile:
    """Rebuild a profile from its report files (bulky fields stay None).

    Extra metadata keys (provenance blocks and the like) are ignored.
    """
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    known = {f.name for f in dataclasses.fields(RobustnessProfile)} - {"points"}
    meta = {k: v for k, v in meta.items() if k in known}
    points = []
    with open(jsonl_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            points.append(
                PointProfile(
                    point_index=rec["index"],
                    label=rec["label"],
                    original_correct=rec["original_correct"],
                    neighbor_accuracy=rec["neighbor_accuracy"],
                    diversity_lambda=rec["diversity_lambda"],
                    m=rec["m"],
                    transforms_digest=rec["transforms_digest"],
                )
            )
    return RobustnessProfile(points=points, **meta)
