"""Binary tensor container (TPAK), dataset manifests, synthetic data.

TPAK layout, all little-endian:

    bytes 0..3   magic "TPAK"
    byte  4      format version (1)
    byte  5      dtype code: 1 = float32, 2 = uint32
    bytes 6..7   rank as u16
    next 8*rank  dims as u64 each
    rest         payload, row-major

A 1-D float32 array of one element is therefore a 20-byte file.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TPAK"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<u4")}
_CODE_FOR_KIND = {"f": 1, "u": 2}


class TensorPackError(Exception):
    """Base error for TPAK serialization problems."""


class BadMagicError(TensorPackError):
    pass


class UnknownDtypeError(TensorPackError):
    pass


class TruncatedError(TensorPackError):
    pass


def pack_tensor(array: np.ndarray) -> bytes:
    """Serialize a float32/uint32 array to TPAK bytes."""
    array = np.asarray(array)
    if array.dtype == np.float32:
        code = 1
    elif array.dtype == np.uint32:
        code = 2
    else:
        raise UnknownDtypeError(f"unsupported dtype {array.dtype}; use float32 or uint32")
    if array.ndim < 1:
        raise TensorPackError("rank must be >= 1")
    if array.ndim > 0xFFFF:
        raise TensorPackError("rank exceeds u16")
    if any(d < 1 for d in array.shape):
        raise TensorPackError(f"every dim must be >= 1, got {array.shape}")
    nbytes = int(np.prod([int(d) for d in array.shape], dtype=object)) * 4
    if nbytes >= 2**63:
        raise TensorPackError("dims overflow")
    header = struct.pack("<4sBBH", MAGIC, VERSION, code, array.ndim)
    dims = b"".join(struct.pack("<Q", d) for d in array.shape)
    payload = np.ascontiguousarray(array).tobytes()
    return header + dims + payload


def write_tensorpack(array: np.ndarray, destination) -> None:
    """Serialize a float32/uint32 array to a TPAK file."""
    blob = pack_tensor(array)
    with open(destination, "wb") as fh:
        fh.write(blob)


def unpack_tensor(blob: bytes, offset: int = 0):
    """Decode one tensor from ``blob`` at ``offset``.

    Returns ``(array, end_offset)`` so several tensors can be unpacked from a
    single buffer back to back.  Bytes past the tensor are the caller's
    business.
    """
    if len(blob) - offset < 8:
        raise TruncatedError(f"too short for header ({len(blob) - offset} bytes)")
    magic, version, code, rank = struct.unpack_from("<4sBBH", blob, offset)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorPackError(f"unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    if rank < 1:
        raise TensorPackError("rank must be >= 1")
    dims_end = offset + 8 + 8 * rank
    if len(blob) < dims_end:
        raise TruncatedError("data ends inside the dims table")
    dims = struct.unpack_from(f"<{rank}Q", blob, offset + 8)
    if any(d < 1 for d in dims):
        raise TensorPackError(f"every dim must be >= 1, got {dims}")
    count = 1
    for d in dims:
        count *= d
    end = dims_end + count * 4
    if len(blob) < end:
        raise TruncatedError(f"payload truncated: need {end - offset} bytes, have {len(blob) - offset}")
    data = np.frombuffer(blob, dtype=_DTYPE_CODES[code], count=count, offset=dims_end)
    return data.reshape(dims).copy(), end


def read_tensorpack(source) -> np.ndarray:
    """Read a TPAK file back into a numpy array (float32 or uint32)."""
    with open(source, "rb") as fh:
        blob = fh.read()
    array, _ = unpack_tensor(blob)
    return array


@dataclasses.dataclass
class DatasetManifest:
    """JSON manifest tying together image and target packs.

    Paths are stored relative to the manifest file's directory.
    """

    task: str  # "classification" | "regression"
    image_dims: tuple[int, int, int]  # (H, W, C)
    images: str
    targets: str
    num_classes: int | None = None
    class_names: list[str] | None = None
    metadata: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and (self.num_classes is None or self.num_classes < 2):
            raise ValueError("classification manifests need num_classes >= 2")

    def to_json(self) -> str:
        doc = {
            "task": self.task,
            "image_dims": list(self.image_dims),
            "images": self.images,
            "targets": self.targets,
        }
        if self.num_classes is not None:
            doc["num_classes"] = self.num_classes
        if self.class_names is not None:
            doc["class_names"] = self.class_names
        if self.metadata:
            doc["metadata"] = self.metadata
        return json.dumps(doc, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text())
        return cls(
            task=doc["task"],
            image_dims=tuple(doc["image_dims"]),
            images=doc["images"],
            targets=doc["targets"],
            num_classes=doc.get("num_classes"),
            class_names=doc.get("class_names"),
            metadata=doc.get("metadata", {}),
        )


def load_dataset(manifest_path) -> tuple[DatasetManifest, np.ndarray, np.ndarray]:
    """Load and validate (manifest, images N×H×W×C, targets N)."""
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.load(manifest_path)
    base = manifest_path.parent
    images = read_tensorpack(base / manifest.images)
    targets = read_tensorpack(base / manifest.targets)
    h, w, c = manifest.image_dims
    if images.ndim != 4 or images.shape[1:] != (h, w, c):
        raise TensorPackError(f"image pack shape {images.shape} does not match manifest dims {(h, w, c)}")
    if images.dtype != np.float32:
        raise TensorPackError("image pack must be float32")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise TensorPackError("image values outside [0, 1]")
    if targets.shape[0] != images.shape[0]:
        raise TensorPackError("targets length does not match image count")
    if manifest.task == "classification":
        if targets.dtype != np.uint32:
            raise TensorPackError("classification targets must be uint32 labels")
        if targets.size and int(targets.max()) >= manifest.num_classes:
            raise TensorPackError(f"label {int(targets.max())} out of range for {manifest.num_classes} classes")
    else:
        if targets.dtype != np.float32:
            raise TensorPackError("regression targets must be float32")
    return manifest, images, targets


# --- synthetic image-classification data ------------------------------------

SHAPE_NAMES = ["disk", "ring", "cross", "hbar", "vbar", "diag", "xdiag", "frame"]


def _render_shape(shape: str, side: int, cx: float, cy: float, scale: float) -> np.ndarray:
    """Soft-edged [0,1] mask for one shape on a side×side grid."""
    ys, xs = np.mgrid[0:side, 0:side]
    # normalized coords in [-1, 1], jittered center
    x = (2.0 * xs / (side - 1) - 1.0) - cx
    y = (2.0 * ys / (side - 1) - 1.0) - cy
    soft = 3.0 / side  # ~1.5 px edge feather
    r = np.hypot(x, y)

    def band(dist, half_width):
        return np.clip((half_width - dist) / soft + 0.5, 0.0, 1.0)

    if shape == "disk":
        return band(r, 0.45 * scale)
    if shape == "ring":
        return band(np.abs(r - 0.48 * scale), 0.14 * scale)
    if shape == "cross":
        return np.maximum(band(np.abs(y), 0.14 * scale) * band(np.abs(x), 0.62 * scale),
                          band(np.abs(x), 0.14 * scale) * band(np.abs(y), 0.62 * scale))
    if shape == "hbar":
        return band(np.abs(y), 0.16 * scale) * band(np.abs(x), 0.66 * scale)
    if shape == "vbar":
        return band(np.abs(x), 0.16 * scale) * band(np.abs(y), 0.66 * scale)
    if shape == "diag":
        return band(np.abs(y - x) / np.sqrt(2.0), 0.15 * scale) * band(r, 0.75 * scale)
    if shape == "xdiag":
        d = np.minimum(np.abs(y - x), np.abs(y + x)) / np.sqrt(2.0)
        return band(d, 0.14 * scale) * band(r, 0.75 * scale)
    if shape == "frame":
        q = np.maximum(np.abs(x), np.abs(y))
        return band(np.abs(q - 0.5 * scale), 0.12 * scale)
    raise ValueError(f"unknown shape {shape!r}")


def synthesize(n_points: int, image_side: int, n_classes: int,
               ambiguity_fraction: float, seed: int,
               channels: int = 1) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Render a labeled shape dataset; returns (images, labels, blended_indices).

    An exact round(n_points * ambiguity_fraction) of the points are
    alpha-blended mixtures of two classes.  Those carry the dominant class's
    label but sit near the class boundary, which makes them weak by
    construction under spatial transformation.
    """
    if not 2 <= n_classes <= 8:
        raise ValueError("n_classes must be in 2..8")
    if image_side < 16:
        raise ValueError("image_side must be >= 16")
    if not 0.0 <= ambiguity_fraction <= 1.0:
        raise ValueError("ambiguity_fraction must be in [0, 1]")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")

    rng = np.random.default_rng(seed)
    n_blend = round(n_points * ambiguity_fraction)
    blended = sorted(rng.choice(n_points, size=n_blend, replace=False).tolist()) if n_blend else []
    blended_set = set(blended)

    images = np.empty((n_points, image_side, image_side, channels), dtype=np.float32)
    labels = np.empty(n_points, dtype=np.uint32)

    def jittered(shape):
        cx, cy = rng.uniform(-0.12, 0.12, size=2)
        scale = rng.uniform(0.85, 1.15)
        return _render_shape(shape, image_side, cx, cy, scale)

    for i in range(n_points):
        label = int(rng.integers(n_classes))
        base = jittered(SHAPE_NAMES[label])
        if i in blended_set:
            other = int(rng.integers(n_classes - 1))
            if other >= label:
                other += 1
            alpha = rng.uniform(0.35, 0.5)
            base = (1.0 - alpha) * base + alpha * jittered(SHAPE_NAMES[other])
        intensity = rng.uniform(0.75, 1.0)
        img = intensity * base + rng.uniform(0.0, 0.06, size=base.shape)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        images[i] = img[:, :, None] if channels == 1 else np.stack([img] * 3, axis=-1)
        labels[i] = label
    return images, labels, blended


def generate_synthetic_dataset(n_points: int, image_side: int, n_classes: int,
                               ambiguity_fraction: float, seed: int, out_dir,
                               channels: int = 1) -> DatasetManifest:
    """Render a synthetic dataset to out_dir and write its manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, labels, blended = synthesize(n_points, image_side, n_classes,
                                         ambiguity_fraction, seed, channels)
    write_tensorpack(images, out_dir / "images.tpak")
    write_tensorpack(labels, out_dir / "targets.tpak")
    manifest = DatasetManifest(
        task="classification",
        image_dims=(image_side, image_side, channels),
        images="images.tpak",
        targets="targets.tpak",
        num_classes=n_classes,
        class_names=SHAPE_NAMES[:n_classes],
        metadata={
            "generator": "synthetic-shapes",
            "seed": seed,
            "n_points": n_points,
            "ambiguity_fraction": ambiguity_fraction,
            "n_blended": len(blended),
            "blended_indices": blended,
        },
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
