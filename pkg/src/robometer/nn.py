"""Small dense-network engine: forward, backprop, Adam, model files.

Hidden layers are ReLU.  Two output heads exist: ``softmax`` (classification,
forward returns probabilities) and ``linear`` (single-scalar regression).
Everything runs on numpy; the engine is deliberately small enough that every
gradient path can be checked against finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensorpack import TensorPackError, pack_tensor, unpack_tensor

HEADS = ("softmax", "linear")

MODEL_FORMAT = "robometer-densenet"
MODEL_VERSION = 1

# Adam moment decay / stabilizer constants.
_BETA1 = 0.9
_BETA2 = 0.999
_ADAM_EPS = 1e-8


class ModelFormatError(ValueError):
    """A serialized model file could not be decoded."""


@dataclass
class TrainConfig:
    """Hyperparameters for :func:`train`.

    ``class_weights`` is classification-only; ``None`` means weights inversely
    proportional to class frequency in the training split.  ``val_fraction=0``
    disables the validation split and with it early stopping.
    """

    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 50
    seed: int = 0
    class_weights: Optional[Sequence[float]] = None
    early_stop_patience: int = 5
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")


class DenseNet:
    """Fully connected net; immutable by convention outside :func:`train`."""

    __slots__ = ("layer_sizes", "head", "weights", "biases", "dtype")

    def __init__(
        self,
        layer_sizes: Sequence[int],
        head: str,
        weights: List[np.ndarray],
        biases: List[np.ndarray],
        dtype: np.dtype,
    ) -> None:
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.head = head
        self.weights = weights
        self.biases = biases
        self.dtype = np.dtype(dtype)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def feature_dim(self) -> int:
        """Width of the activations feeding the final layer."""
        return self.layer_sizes[-2]

    def copy(self) -> "DenseNet":
        return DenseNet(
            self.layer_sizes,
            self.head,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.dtype,
        )


def init(
    layer_sizes: Sequence[int],
    seed: int,
    head: str = "softmax",
    dtype=np.float32,
) -> DenseNet:
    """He-scaled random weights, zero biases; deterministic per seed."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError(f"need at least 2 layer sizes, got {len(sizes)}")
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}, got {head!r}")
    if head == "linear" and sizes[-1] != 1:
        raise ValueError("linear head is scalar: final layer size must be 1")
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append((rng.standard_normal((fan_in, fan_out)) * scale).astype(dt))
        biases.append(np.zeros(fan_out, dtype=dt))
    return DenseNet(sizes, head, weights, biases, dt)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, max-shifted for stability."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(net: DenseNet, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=net.dtype)
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ValueError(
            f"batch must be N x {net.input_dim}, got shape {batch.shape}"
        )
    return batch


def _forward_trace(net: DenseNet, batch: np.ndarray) -> List[np.ndarray]:
    """Activations per layer: [input, hidden..., final linear output]."""
    acts = [batch]
    h = batch
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0)
        acts.append(h)
    return acts


def forward(net: DenseNet, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Run the net; returns (outputs, penultimate activations).

    The softmax head returns probabilities.  The penultimate array is whatever
    feeds the final layer — for a single-layer net, the input itself.
    """
    batch = _check_batch(net, batch)
    acts = _forward_trace(net, batch)
    out = acts[-1]
    if net.head == "softmax":
        out = softmax(out)
    return out, acts[-2]


def _check_targets(net: DenseNet, batch: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if net.head == "softmax":
        y = np.asarray(targets)
        if y.ndim != 1 or y.shape[0] != batch.shape[0]:
            raise ValueError(f"targets must be ({batch.shape[0]},), got {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= net.output_dim):
            raise ValueError("class labels out of range")
        return y.astype(np.int64)
    y = np.asarray(targets, dtype=net.dtype).reshape(-1)
    if y.shape[0] != batch.shape[0]:
        raise ValueError(f"targets must have {batch.shape[0]} entries, got {y.shape[0]}")
    return y


def _weight_vector(
    net: DenseNet, class_weights: Optional[Sequence[float]]
) -> Optional[np.ndarray]:
    if class_weights is None:
        return None
    if net.head != "softmax":
        raise ValueError("class_weights only apply to the softmax head")
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (net.output_dim,):
        raise ValueError(
            f"class_weights must have {net.output_dim} entries, got shape {w.shape}"
        )
    if np.any(w < 0):
        raise ValueError("class_weights must be nonnegative")
    return w


def _loss_and_delta(
    net: DenseNet,
    final: np.ndarray,
    y: np.ndarray,
    w: Optional[np.ndarray],
) -> Tuple[float, np.ndarray]:
    """Loss plus gradient of the loss w.r.t. the final linear output."""
    n = final.shape[0]
    if net.head == "softmax":
        shifted = final - final.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        nll = -log_probs[np.arange(n), y]
        probs = np.exp(log_probs)
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), y] = 1
        if w is None:
            loss = float(nll.mean())
            delta = (probs - onehot) / n
        else:
            wy = w[y]
            loss = float((wy * nll).mean())
            delta = (probs - onehot) * (wy / n)[:, None]
        return loss, delta.astype(net.dtype, copy=False)
    resid = final[:, 0] - y
    loss = float(np.mean(resid.astype(np.float64) ** 2))
    delta = (2.0 * resid / n)[:, None]
    return loss, delta.astype(net.dtype, copy=False)


def loss(
    net: DenseNet,
    batch: np.ndarray,
    targets: np.ndarray,
    class_weights: Optional[Sequence[float]] = None,
) -> float:
    """Weighted cross-entropy (softmax head) or mean squared error (linear)."""
    batch = _check_batch(net, batch)
    y = _check_targets(net, batch, targets)
    w = _weight_vector(net, class_weights)
    acts = _forward_trace(net, batch)
    value, _ = _loss_and_delta(net, acts[-1], y, w)
    return value


Gradients = List[Tuple[np.ndarray, np.ndarray]]


def _loss_and_grads(
    net: DenseNet,
    batch: np.ndarray,
    y: np.ndarray,
    w: Optional[np.ndarray],
) -> Tuple[float, Gradients]:
    acts = _forward_trace(net, batch)
    value, delta = _loss_and_delta(net, acts[-1], y, w)
    grads: Gradients = [None] * len(net.weights)  # type: ignore[list-item]
    for i in range(len(net.weights) - 1, -1, -1):
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ net.weights[i].T) * (acts[i] > 0)
    return value, grads


def backward(
    net: DenseNet,
    batch: np.ndarray,
    targets: np.ndarray,
    class_weights: Optional[Sequence[float]] = None,
) -> Gradients:
    """Per-layer (dW, db) of the loss in :func:`loss`."""
    batch = _check_batch(net, batch)
    y = _check_targets(net, batch, targets)
    w = _weight_vector(net, class_weights)
    _, grads = _loss_and_grads(net, batch, y, w)
    return grads


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    """Unweighted mean of per-class F1; undefined classes count as 0."""
    total = 0.0
    for c in range(num_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        total += 2 * p * r / (p + r) if p + r else 0.0
    return total / num_classes


def _inverse_frequency_weights(y: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(y, minlength=num_classes).astype(np.float64)
    weights = np.zeros(num_classes, dtype=np.float64)
    present = counts > 0
    weights[present] = y.shape[0] / (num_classes * counts[present])
    return weights


def train(
    net: DenseNet,
    features: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
) -> DenseNet:
    """Mini-batch Adam on a copy of ``net``; the input net is untouched.

    Classification early-stops on validation macro-F1, regression on
    validation loss, both with ``early_stop_patience`` and best-epoch weight
    restore.  Deterministic for a fixed seed under the sequential schedule.
    """
    batch_all = _check_batch(net, features)
    y_all = _check_targets(net, batch_all, targets)
    if batch_all.shape[0] == 0:
        raise ValueError("training set is empty")

    out = net.copy()
    if config.max_epochs == 0:
        return out

    rng = np.random.default_rng(config.seed)
    n = batch_all.shape[0]
    n_val = int(round(config.val_fraction * n))
    perm = rng.permutation(n)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if tr_idx.size == 0:
        raise ValueError("validation split leaves no training points")

    if net.head == "softmax":
        w = _weight_vector(net, config.class_weights)
        if w is None:
            w = _inverse_frequency_weights(y_all[tr_idx], net.output_dim)
    else:
        if config.class_weights is not None:
            raise ValueError("class_weights only apply to the softmax head")
        w = None

    m_state = [(np.zeros_like(wt), np.zeros_like(b)) for wt, b in zip(out.weights, out.biases)]
    v_state = [(np.zeros_like(wt), np.zeros_like(b)) for wt, b in zip(out.weights, out.biases)]
    step = 0

    best_metric = None
    best_params = None
    stalled = 0
    maximize = net.head == "softmax"

    for epoch in range(config.max_epochs):
        order = tr_idx[rng.permutation(tr_idx.size)]
        for start in range(0, order.size, config.batch_size):
            sel = order[start : start + config.batch_size]
            value, grads = _loss_and_grads(out, batch_all[sel], y_all[sel], w)
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss {value} at epoch {epoch}, step {step}"
                )
            step += 1
            correction1 = 1.0 - _BETA1**step
            correction2 = 1.0 - _BETA2**step
            for i, (dw, db) in enumerate(grads):
                mw, mb = m_state[i]
                vw, vb = v_state[i]
                mw += (1 - _BETA1) * (dw - mw)
                mb += (1 - _BETA1) * (db - mb)
                vw += (1 - _BETA2) * (dw * dw - vw)
                vb += (1 - _BETA2) * (db * db - vb)
                out.weights[i] -= (
                    config.learning_rate
                    * (mw / correction1)
                    / (np.sqrt(vw / correction2) + _ADAM_EPS)
                ).astype(out.dtype, copy=False)
                out.biases[i] -= (
                    config.learning_rate
                    * (mb / correction1)
                    / (np.sqrt(vb / correction2) + _ADAM_EPS)
                ).astype(out.dtype, copy=False)

        for arr in out.weights + out.biases:
            if not np.all(np.isfinite(arr)):
                raise RuntimeError(f"non-finite parameters after epoch {epoch}")

        if val_idx.size == 0:
            continue
        if net.head == "softmax":
            # F1 drives early stopping; val loss breaks plateaus so later,
            # lower-loss epochs still win the weight restore
            probs, _ = forward(out, batch_all[val_idx])
            f1 = macro_f1(y_all[val_idx], probs.argmax(axis=1), net.output_dim)
            val_acts = _forward_trace(out, batch_all[val_idx])
            ce, _ = _loss_and_delta(out, val_acts[-1], y_all[val_idx], w)
            metric = (f1, -ce)
        else:
            metric = loss(out, batch_all[val_idx], y_all[val_idx])
        better = best_metric is None or (
            metric > best_metric if maximize else metric < best_metric
        )
        if better:
            best_metric = metric
            best_params = ([a.copy() for a in out.weights], [a.copy() for a in out.biases])
            stalled = 0
        else:
            stalled += 1
            if config.early_stop_patience and stalled >= config.early_stop_patience:
                break

    if best_params is not None:
        out.weights, out.biases = best_params
    return out


def save_model(net: DenseNet, path) -> None:
    """Write ``net`` to ``path``: u32 header length, JSON header, tensor blobs."""
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "head": net.head,
    }
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(blob)), blob]
    for w, b in zip(net.weights, net.biases):
        parts.append(pack_tensor(np.ascontiguousarray(w, dtype=np.float32)))
        parts.append(pack_tensor(np.ascontiguousarray(b, dtype=np.float32)))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> DenseNet:
    """Inverse of :func:`save_model`; every mismatch is a ModelFormatError."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ModelFormatError("file shorter than the header length field")
    (header_len,) = struct.unpack_from("<I", raw)
    if len(raw) < 4 + header_len:
        raise ModelFormatError("truncated JSON header")
    try:
        header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a dense-model file")
    if header.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported version {header.get('version')!r}")
    sizes = header.get("layer_sizes")
    head = header.get("head")
    if (
        not isinstance(sizes, list)
        or len(sizes) < 2
        or not all(isinstance(s, int) and s >= 1 for s in sizes)
    ):
        raise ModelFormatError(f"bad layer_sizes {sizes!r}")
    if head not in HEADS:
        raise ModelFormatError(f"bad head {head!r}")

    offset = 4 + header_len
    weights: List[np.ndarray] = []
    biases: List[np.ndarray] = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            try:
                arr, offset = unpack_tensor(raw, offset)
            except TensorPackError as exc:
                raise ModelFormatError(f"bad tensor blob at byte {offset}: {exc}") from exc
            if arr.shape != shape or arr.dtype != np.float32:
                raise ModelFormatError(
                    f"tensor is {arr.dtype} {arr.shape}, header implies float32 {shape}"
                )
            (weights if len(shape) == 2 else biases).append(arr)
    if offset != len(raw):
        raise ModelFormatError(f"{len(raw) - offset} trailing bytes after tensors")
    return DenseNet(sizes, head, weights, biases, np.float32)
