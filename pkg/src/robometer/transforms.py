"""Natural-variation engine: spatial warps and simplified weather effects.

Spatial neighbors combine a rotation (degrees, positive = counterclockwise
on screen) with a fractional pixel translation, composed into one affine
matrix so each image is resampled exactly once.  Weather neighbors use
fixed photometric formulas (fog blend toward white, rain streak overlay)
chosen for deterministic, testable behavior rather than physical fidelity.

Two interchangeable warp backends exist: a compiled kernel (_warp_cy) and a
numpy fallback (_warp_numpy).  The compiled one is picked at import when
available; ROBOMETER_PURE_PYTHON=1 forces the fallback.  Both produce
bit-identical output.
"""

from __future__ import annotations

import dataclasses
import math
import os

import numpy as np

from ._rng import Stream
from . import _warp_numpy

try:
    from . import _warp_cy
except ImportError:
    _warp_cy = None

_FORCE_PY = os.environ.get("ROBOMETER_PURE_PYTHON", "0") not in ("", "0")
WARP_BACKEND = "compiled" if (_warp_cy is not None and not _FORCE_PY) else "numpy"

ROTATION_LIMIT_DEG = 30.0
TRANSLATION_LIMIT_FRAC = 0.1  # of width/height
DEFAULT_RAIN_ALPHA = (0.5, 0.85)
DEFAULT_RAIN_SLANT = 0.2  # px of horizontal drift per row


@dataclasses.dataclass(frozen=True)
class TransformSpec:
    """One sampled natural variation."""

    kind: str  # "spatial" | "fog" | "rain"
    rotation_deg: float = 0.0
    dx_px: float = 0.0
    dy_px: float = 0.0
    fog_intensity: float = 0.0
    rain_density: float = 0.0
    rng_tag: int = 0  # rain streak placement stream

    def __post_init__(self):
        if self.kind not in ("spatial", "fog", "rain"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if abs(self.rotation_deg) > ROTATION_LIMIT_DEG:
            raise ValueError(f"rotation {self.rotation_deg} outside ±{ROTATION_LIMIT_DEG} deg")
        if not 0.0 <= self.fog_intensity <= 1.0:
            raise ValueError("fog_intensity must be in [0, 1]")
        if not 0.0 <= self.rain_density <= 1.0:
            raise ValueError("rain_density must be in [0, 1]")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "spatial":
            d.update(rotation_deg=self.rotation_deg, dx_px=self.dx_px, dy_px=self.dy_px)
        elif self.kind == "fog":
            d.update(fog_intensity=self.fog_intensity)
        else:
            d.update(rain_density=self.rain_density, rng_tag=self.rng_tag)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(**d)


def sample_spatial(stream: Stream, width: int, height: int) -> TransformSpec:
    """Continuous uniform draw of rotation and sub-pixel translation."""
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    rot = stream.uniform(-ROTATION_LIMIT_DEG, ROTATION_LIMIT_DEG)
    dx = stream.uniform(-TRANSLATION_LIMIT_FRAC * width, TRANSLATION_LIMIT_FRAC * width)
    dy = stream.uniform(-TRANSLATION_LIMIT_FRAC * height, TRANSLATION_LIMIT_FRAC * height)
    return TransformSpec(kind="spatial", rotation_deg=rot, dx_px=dx, dy_px=dy)


def _cos_deg(deg: float) -> float:
    r = deg % 360.0
    if r == 0.0:
        return 1.0
    if r == 90.0 or r == 270.0:
        return 0.0
    if r == 180.0:
        return -1.0
    return math.cos(math.radians(deg))


def _sin_deg(deg: float) -> float:
    r = deg % 360.0
    if r == 0.0 or r == 180.0:
        return 0.0
    if r == 90.0:
        return 1.0
    if r == 270.0:
        return -1.0
    return math.sin(math.radians(deg))


def rotation_translation_matrix(rotation_deg: float, dx_px: float, dy_px: float,
                                width: int, height: int) -> np.ndarray:
    """Forward 2×3 affine map: rotate about the image center, then translate.

    Acts on (x=col, y=row) homogeneous pixel coordinates, y pointing down.
    Trig is snapped exactly at multiples of 90° so right-angle fixtures are
    reproduced without rounding.
    """
    c = _cos_deg(rotation_deg)
    s = _sin_deg(rotation_deg)
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    ox = cx + dx_px - (c * cx + s * cy)
    oy = cy + dy_px - (-s * cx + c * cy)
    return np.array([[c, s, ox], [-s, c, oy]], dtype=np.float64)


def affine_matrix(spec: TransformSpec, width: int, height: int) -> np.ndarray:
    """Forward matrix for a spatial spec, range-checked against the frame."""
    if spec.kind != "spatial":
        raise ValueError(f"affine_matrix needs a spatial spec, got {spec.kind!r}")
    if abs(spec.dx_px) > TRANSLATION_LIMIT_FRAC * width:
        raise ValueError(f"|dx| {abs(spec.dx_px)} exceeds {TRANSLATION_LIMIT_FRAC:.0%} of width {width}")
    if abs(spec.dy_px) > TRANSLATION_LIMIT_FRAC * height:
        raise ValueError(f"|dy| {abs(spec.dy_px)} exceeds {TRANSLATION_LIMIT_FRAC:.0%} of height {height}")
    return rotation_translation_matrix(spec.rotation_deg, spec.dx_px, spec.dy_px, width, height)


def _invert_affine(matrix: np.ndarray) -> np.ndarray:
    a, b, tx = (float(v) for v in matrix[0])
    c, d, ty = (float(v) for v in matrix[1])
    det = a * d - b * c
    if det == 0.0:
        raise ValueError("affine matrix is singular")
    return np.array([d / det, -b / det, (b * ty - d * tx) / det,
                     -c / det, a / det, (c * tx - a * ty) / det], dtype=np.float64)


def warp_bilinear(image: np.ndarray, matrix: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Apply the forward affine map with one inverse-mapped bilinear resample.

    Out-of-frame source coordinates fill with zero; output is clamped to
    [0, 1] and keeps the input's H×W×C shape.
    """
    image = np.ascontiguousarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError(f"image must be H×W×C, got shape {image.shape}")
    inv = _invert_affine(np.asarray(matrix, dtype=np.float64))
    backend = backend or WARP_BACKEND
    if backend == "compiled":
        if _warp_cy is None:
            raise RuntimeError("compiled warp backend not available")
        return _warp_cy.warp_bilinear_kernel(image, inv)
    if backend == "numpy":
        return _warp_numpy.warp_bilinear_kernel(image, inv)
    raise ValueError(f"unknown warp backend {backend!r}")


def apply_fog(image: np.ndarray, intensity: float) -> np.ndarray:
    """Blend toward white: out = (1 − intensity)·in + intensity."""
    if not 0.0 <= intensity <= 1.0:
        raise ValueError("fog intensity must be in [0, 1]")
    image = np.asarray(image, dtype=np.float32)
    out = (1.0 - intensity) * image + intensity
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def default_rain_streaks(width: int) -> int:
    """Streak budget at density 1 for a given frame width."""
    return max(1, width // 4)


def apply_rain(image: np.ndarray, density: float, stream: Stream,
               max_streaks: int | None = None) -> np.ndarray:
    """Heavy-rain ambiance: 0.9× darkening plus ⌈density·K⌉ bright streaks.

    Streaks are near-vertical (small random slant), one pixel wide, full
    frame height, starting at distinct top-row columns; placement is fully
    determined by the stream.
    """
    if not 0.0 <= density <= 1.0:
        raise ValueError("rain density must be in [0, 1]")
    image = np.asarray(image, dtype=np.float32)
    h, w, _ = image.shape
    k_max = default_rain_streaks(w) if max_streaks is None else max_streaks
    n = math.ceil(density * k_max)
    out = (np.float32(0.9) * image).astype(np.float32)
    if n > 0:
        cols = stream.sample_without_replacement(w, n)
        ys = np.arange(h)
        for x_top in cols:
            slant = stream.uniform(-DEFAULT_RAIN_SLANT, DEFAULT_RAIN_SLANT)
            alpha = np.float32(stream.uniform(*DEFAULT_RAIN_ALPHA))
            xs = np.rint(x_top + slant * ys).astype(np.int64)
            valid = (xs >= 0) & (xs < w)
            yv, xv = ys[valid], xs[valid]
            out[yv, xv, :] = (np.float32(1.0) - alpha) * out[yv, xv, :] + alpha
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_transform(image: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Apply any TransformSpec; rain placement replays from spec.rng_tag."""
    if spec.kind == "spatial":
        h, w, _ = image.shape
        return warp_bilinear(image, affine_matrix(spec, w, h))
    if spec.kind == "fog":
        return apply_fog(image, spec.fog_intensity)
    return apply_rain(image, spec.rain_density, Stream(spec.rng_tag))
