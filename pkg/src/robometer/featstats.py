"""Feature-space characterization and distribution statistics.

Centers are coordinate-wise medians per class.  A point's boundary ratio r
divides its distance to its own center by the distance to the nearest other
center — large r means the point sits near a decision boundary.  The rest
of the module is the small statistics kit used by the analyze report:
Cohen's d, Mann-Whitney U, Spearman/Pearson correlation, fixed 20-bin
histograms, and cross-model accuracy deltas.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import warnings
from typing import Dict, List, Optional, Sequence

import numpy as np

from .robustness import RobustnessProfile, label_points

METRICS = ("euclidean", "cosine")


@dataclasses.dataclass
class ClassCenters:
    centers: Dict[int, np.ndarray]
    metric: str = "euclidean"

    def digest(self) -> str:
        h = hashlib.sha256()
        for cls in sorted(self.centers):
            h.update(str(cls).encode())
            h.update(np.ascontiguousarray(self.centers[cls], dtype=np.float64).tobytes())
        return h.hexdigest()[:12]


def class_centers(
    features: np.ndarray, labels: np.ndarray, metric: str = "euclidean"
) -> ClassCenters:
    """Coordinate-wise median feature vector per class present in the data."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError(
            f"features must be N x D with one label per row, got "
            f"{features.shape} and {labels.shape}"
        )
    centers: Dict[int, np.ndarray] = {}
    for cls in np.unique(labels):
        members = features[labels == cls]
        if members.shape[0] == 0:
            raise ValueError(f"class {cls} has no members")
        centers[int(cls)] = np.median(members, axis=0)
    if not centers:
        raise ValueError("no classes in labels")
    return ClassCenters(centers=centers, metric=metric)


def _distance(a: np.ndarray, b: np.ndarray, metric: str) -> float:
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0  # cosine distance to the zero vector is undefined; max it out
    return float(1.0 - np.dot(a, b) / (na * nb))


def boundary_ratio(feature: np.ndarray, own_class: int, centers: ClassCenters) -> float:
    """r = d(point, own center) / d(point, nearest other center)."""
    if len(centers.centers) < 2:
        raise ValueError("need centers for at least 2 classes")
    if own_class not in centers.centers:
        raise ValueError(f"no center for class {own_class}")
    feature = np.asarray(feature, dtype=np.float64)
    d_own = _distance(feature, centers.centers[own_class], centers.metric)
    d_other = min(
        _distance(feature, c, centers.metric)
        for cls, c in centers.centers.items()
        if cls != own_class
    )
    if d_other == 0.0:
        warnings.warn("point coincides with another class's center; ratio is infinite")
        return math.inf
    return d_own / d_other


def cohens_d(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """(mean_a − mean_b) / pooled standard deviation."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    pooled_var = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (
        a.size + b.size - 2
    )
    if pooled_var == 0.0:
        raise ValueError("zero pooled standard deviation")
    return float((a.mean() - b.mean()) / math.sqrt(pooled_var))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(sample_a: Sequence[float], sample_b: Sequence[float]):
    """(min-side U, two-sided p) via the tie-corrected normal approximation.

    Degenerate all-tied input yields p = 1.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    n1, n2 = a.size, b.size
    combined = np.concatenate([a, b])
    ranks = _average_ranks(combined)
    r1 = float(ranks[:n1].sum())
    u1 = r1 - n1 * (n1 + 1) / 2.0
    u2 = n1 * n2 - u1
    u = min(u1, u2)
    n = n1 + n2
    _, tie_counts = np.unique(combined, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts))
    var = (n1 * n2 / 12.0) * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0.0:
        return u, 1.0
    mu = n1 * n2 / 2.0
    # continuity correction pulls the statistic half a step toward the mean,
    # never past it
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    p = math.erfc(z / math.sqrt(2.0))
    return u, min(p, 1.0)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.size < 3:
        raise ValueError("need equal-length inputs with at least 3 values")
    xc = xv - xv.mean()
    yc = yv - yv.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero variance input")
    return float(np.sum(xc * yc) / (sx * sy))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.size < 3:
        raise ValueError("need equal-length inputs with at least 3 values")
    return pearson(_average_ranks(xv), _average_ranks(yv))


def diversity_accuracy_correlation(profile: RobustnessProfile) -> float:
    """Spearman(neighbor accuracy, λ) with the 100%-accuracy points removed."""
    pairs = [
        (p.neighbor_accuracy, p.diversity_lambda)
        for p in profile.points
        if p.neighbor_accuracy < 1.0
    ]
    if any(lam is None for _, lam in pairs):
        raise ValueError("profile has no diversity values (regression task?)")
    if len(pairs) < 3:
        raise ValueError(
            f"only {len(pairs)} points below 100% accuracy; need at least 3"
        )
    acc, lam = zip(*pairs)
    return spearman(acc, lam)


def histogram20(values: Sequence[float]) -> List[int]:
    """Counts over 20 equal bins of [0, 1]; the top bin includes 1.0."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return [0] * 20
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("values must lie in [0, 1]")
    bins = np.minimum((arr * 20).astype(np.int64), 19)
    return np.bincount(bins, minlength=20).tolist()


def cross_model_delta(
    profile_a: RobustnessProfile,
    profile_b: RobustnessProfile,
    delta: float = 0.2,
) -> float:
    """Fraction of points whose accuracy moved less than ``delta`` between models."""
    if len(profile_a.points) != len(profile_b.points):
        raise ValueError(
            f"profiles cover {len(profile_a.points)} vs {len(profile_b.points)} points"
        )
    if not profile_a.points:
        raise ValueError("profiles are empty")
    hits = sum(
        1
        for pa, pb in zip(profile_a.points, profile_b.points)
        if abs(pa.neighbor_accuracy - pb.neighbor_accuracy) < delta
    )
    return hits / len(profile_a.points)


def analyze(
    profile: RobustnessProfile,
    features: np.ndarray,
    cutoff: float,
    test_profile: Optional[RobustnessProfile] = None,
    other_profile: Optional[RobustnessProfile] = None,
    metric: str = "euclidean",
) -> dict:
    """Boundary-ratio and distribution report for one profiled dataset.

    ``test_profile`` only contributes its accuracy histogram;
    ``other_profile`` (same dataset, different model) adds the cross-model
    delta fraction.
    """
    labels = np.asarray([int(p.label) for p in profile.points])
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{features.shape[0]} feature rows for {labels.shape[0]} profiled points"
        )
    centers = class_centers(features, labels, metric=metric)
    per_point_r = [
        boundary_ratio(features[i], int(labels[i]), centers)
        for i in range(features.shape[0])
    ]
    weak_flags = label_points(profile, cutoff).weak_flags
    r_weak = [r for r, w in zip(per_point_r, weak_flags) if w]
    r_strong = [r for r, w in zip(per_point_r, weak_flags) if not w]

    report = {
        "centers_digest": centers.digest(),
        "cutoff": cutoff,
        "n_weak": len(r_weak),
        "n_strong": len(r_strong),
        "r_w": float(np.mean(r_weak)) if r_weak else None,
        "r_s": float(np.mean(r_strong)) if r_strong else None,
        "cohens_d": None,
        "mwu_u": None,
        "mwu_p": None,
        "spearman_acc_lambda": None,
        "histogram_train": histogram20([p.neighbor_accuracy for p in profile.points]),
        "histogram_test": histogram20([p.neighbor_accuracy for p in test_profile.points])
        if test_profile is not None
        else None,
        "per_point_r": per_point_r,
    }
    if len(r_weak) >= 2 and len(r_strong) >= 2:
        try:
            report["cohens_d"] = cohens_d(r_weak, r_strong)
        except ValueError:
            pass
        u, p = mann_whitney_u(r_weak, r_strong)
        report["mwu_u"] = u
        report["mwu_p"] = p
    if profile.task == "classification":
        try:
            report["spearman_acc_lambda"] = diversity_accuracy_correlation(profile)
        except ValueError:
            pass
    if other_profile is not None:
        report["cross_model_fraction"] = cross_model_delta(profile, other_profile)
    return report
