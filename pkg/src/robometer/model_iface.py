"""Uniform access to models under test.

Two adapters expose the same surface: :class:`BuiltinAdapter` wraps a
:class:`~robometer.nn.DenseNet` in-process, :class:`SubprocessAdapter` talks
to an external process over newline-delimited JSON on stdin/stdout.

Wire protocol (one UTF-8 JSON document per line, ``\\n``-terminated):

* handshake request: ``{"op":"hello"}``
* handshake reply: ``{"name":..., "task":"classification"|"regression",
  "num_classes":K?, "feature_dim":D?, "input_dims":[H,W,C]}``
* predict request: ``{"id":n, "op":"predict", "shape":[H,W,C],
  "inputs":[[f,...],...], "want_features":bool}`` — each inner list is one
  image flattened row-major
* predict reply: ``{"id":n, "outputs":[[...],...], "features":[[...],...]?}``
  or ``{"id":n, "error":"..."}``

Ids start at 1 and increase by one per predict request; hello carries no id.
Replies come back in request order.
"""

from __future__ import annotations

import json
import queue
import subprocess
import threading
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .nn import DenseNet, forward, softmax

TASKS = ("classification", "regression")

DEFAULT_TIMEOUT = 60.0
DEFAULT_BATCH_CAP = 64


class ProtocolError(RuntimeError):
    """The other side violated the wire protocol."""


class AdapterTimeout(ProtocolError):
    """No reply within the deadline; the child process has been killed."""


class AdapterError(RuntimeError):
    """The model reported an error; ``batch_index`` locates the failing chunk."""

    def __init__(self, message: str, batch_index: int = 0) -> None:
        super().__init__(message)
        self.batch_index = batch_index


@dataclass(frozen=True)
class ModelInfo:
    name: str
    task: str
    input_dims: Tuple[int, int, int]
    num_classes: Optional[int] = None
    feature_dim: Optional[int] = None

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if len(self.input_dims) != 3 or any(d < 1 for d in self.input_dims):
            raise ValueError(f"input_dims must be a positive (H, W, C), got {self.input_dims}")
        if self.task == "classification":
            if self.num_classes is None or self.num_classes < 2:
                raise ValueError("classification needs num_classes >= 2")

    @property
    def flat_dim(self) -> int:
        h, w, c = self.input_dims
        return h * w * c


@dataclass
class Prediction:
    outputs: np.ndarray
    top1_confidence: Optional[float]
    features: Optional[np.ndarray] = None

    def predicted_class(self) -> int:
        """Argmax over outputs; ties go to the lowest class index."""
        return int(np.argmax(self.outputs))

    def value(self) -> float:
        """Scalar output for regression models."""
        return float(np.asarray(self.outputs).reshape(-1)[0])


def top1_confidence(outputs_row: np.ndarray) -> float:
    """Max probability of a classification output row.

    Rows that already look like a distribution (nonnegative, summing to 1
    within 1e-3) are used as-is; anything else is treated as logits and
    pushed through softmax first.
    """
    row = np.asarray(outputs_row, dtype=np.float64)
    if abs(float(row.sum()) - 1.0) <= 1e-3 and bool(np.all(row >= 0)):
        return float(row.max())
    return float(softmax(row[None, :])[0].max())


def _check_images(info: ModelInfo, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(info.input_dims):
        raise ValueError(
            f"images must be N x {info.input_dims}, got shape {images.shape}"
        )
    return images


def encode_hello() -> bytes:
    return b'{"op":"hello"}\n'


def encode_predict(
    req_id: int,
    shape: Sequence[int],
    images_flat: Sequence[Sequence[float]],
    want_features: bool,
) -> bytes:
    doc = {
        "id": int(req_id),
        "op": "predict",
        "shape": [int(d) for d in shape],
        "inputs": [[float(v) for v in row] for row in images_flat],
        "want_features": bool(want_features),
    }
    return (json.dumps(doc, separators=(",", ":")) + "\n").encode("utf-8")


class BuiltinAdapter:
    """In-process adapter around a DenseNet; safe for concurrent calls."""

    def __init__(
        self,
        net: DenseNet,
        name: str = "builtin",
        input_dims: Optional[Tuple[int, int, int]] = None,
    ) -> None:
        if input_dims is None:
            input_dims = (1, 1, net.input_dim)
        h, w, c = input_dims
        if h * w * c != net.input_dim:
            raise ValueError(
                f"input_dims {input_dims} do not flatten to {net.input_dim}"
            )
        task = "classification" if net.head == "softmax" else "regression"
        self.net = net
        self._info = ModelInfo(
            name=name,
            task=task,
            input_dims=(h, w, c),
            num_classes=net.output_dim if task == "classification" else None,
            feature_dim=net.feature_dim,
        )

    def handshake(self) -> ModelInfo:
        return self._info

    def predict_batch(
        self, images: np.ndarray, want_features: bool = False
    ) -> List[Prediction]:
        images = _check_images(self._info, images)
        if images.shape[0] == 0:
            return []
        flat = np.ascontiguousarray(images, dtype=np.float32).reshape(images.shape[0], -1)
        outputs, feats = forward(self.net, flat)
        classification = self._info.task == "classification"
        preds = []
        for i in range(outputs.shape[0]):
            row = outputs[i]
            preds.append(
                Prediction(
                    outputs=row,
                    top1_confidence=float(row.max()) if classification else None,
                    features=feats[i].copy() if want_features else None,
                )
            )
        return preds

    def close(self) -> None:
        pass

    def __enter__(self) -> "BuiltinAdapter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class SubprocessAdapter:
    """Adapter around an external model process speaking the NDJSON protocol.

    Requests are serialized through a single lock; large batches are split
    into chunks of ``batch_cap`` to bound line length.
    """

    def __init__(
        self,
        argv: Sequence[str],
        timeout: float = DEFAULT_TIMEOUT,
        batch_cap: int = DEFAULT_BATCH_CAP,
    ) -> None:
        if batch_cap < 1:
            raise ValueError("batch_cap must be >= 1")
        self._timeout = timeout
        self._batch_cap = batch_cap
        self._proc = subprocess.Popen(
            list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )
        self._replies: "queue.Queue[Optional[bytes]]" = queue.Queue()
        self._lock = threading.Lock()
        self._next_id = 1
        self._info: Optional[ModelInfo] = None
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        stdout = self._proc.stdout
        assert stdout is not None
        for line in stdout:
            self._replies.put(line)
        self._replies.put(None)

    def _roundtrip(self, payload: bytes) -> dict:
        stdin = self._proc.stdin
        assert stdin is not None
        try:
            stdin.write(payload)
            stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ProtocolError(f"model process pipe closed: {exc}") from exc
        try:
            line = self._replies.get(timeout=self._timeout)
        except queue.Empty:
            self._proc.kill()
            self._proc.wait()
            raise AdapterTimeout(f"no reply within {self._timeout} s") from None
        if line is None:
            raise ProtocolError("model process closed its output")
        try:
            reply = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"reply is not valid JSON: {exc}") from exc
        if not isinstance(reply, dict):
            raise ProtocolError(f"reply must be an object, got {type(reply).__name__}")
        return reply

    def handshake(self) -> ModelInfo:
        with self._lock:
            if self._info is not None:
                return self._info
            reply = self._roundtrip(encode_hello())
            for key in ("name", "task", "input_dims"):
                if key not in reply:
                    raise ProtocolError(f"hello reply missing {key!r}")
            dims = reply["input_dims"]
            if not (isinstance(dims, list) and len(dims) == 3):
                raise ProtocolError(f"bad input_dims {dims!r}")
            try:
                self._info = ModelInfo(
                    name=str(reply["name"]),
                    task=reply["task"],
                    input_dims=tuple(int(d) for d in dims),
                    num_classes=reply.get("num_classes"),
                    feature_dim=reply.get("feature_dim"),
                )
            except (TypeError, ValueError) as exc:
                raise ProtocolError(f"bad hello reply: {exc}") from exc
            return self._info

    def predict_batch(
        self, images: np.ndarray, want_features: bool = False
    ) -> List[Prediction]:
        info = self.handshake()
        images = _check_images(info, images)
        n = images.shape[0]
        if n == 0:
            return []
        flat = np.ascontiguousarray(images, dtype=np.float32).reshape(n, -1)
        preds: List[Prediction] = []
        for start in range(0, n, self._batch_cap):
            chunk = flat[start : start + self._batch_cap]
            with self._lock:
                req_id = self._next_id
                self._next_id += 1
                reply = self._roundtrip(
                    encode_predict(req_id, info.input_dims, chunk, want_features)
                )
            if reply.get("id") != req_id:
                raise ProtocolError(
                    f"reply id {reply.get('id')!r} does not match request id {req_id}"
                )
            if "error" in reply:
                raise AdapterError(str(reply["error"]), batch_index=start)
            outputs = reply.get("outputs")
            if not isinstance(outputs, list) or len(outputs) != chunk.shape[0]:
                raise ProtocolError(
                    f"expected {chunk.shape[0]} output rows, got "
                    f"{len(outputs) if isinstance(outputs, list) else outputs!r}"
                )
            feats = None
            if want_features and info.feature_dim is not None:
                feats = reply.get("features")
                if not isinstance(feats, list) or len(feats) != chunk.shape[0]:
                    raise ProtocolError("features missing or wrong length in reply")
            classification = info.task == "classification"
            for i, row in enumerate(outputs):
                arr = np.asarray(row, dtype=np.float64)
                preds.append(
                    Prediction(
                        outputs=arr,
                        top1_confidence=top1_confidence(arr) if classification else None,
                        features=np.asarray(feats[i], dtype=np.float64)
                        if feats is not None
                        else None,
                    )
                )
        return preds

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                if self._proc.stdin is not None:
                    self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self) -> "SubprocessAdapter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self) -> None:
        try:
            if self._proc.poll() is None:
                self._proc.kill()
        except Exception:
            pass


def handshake(adapter) -> ModelInfo:
    return adapter.handshake()


def predict_batch(adapter, images: np.ndarray, want_features: bool = False) -> List[Prediction]:
    return adapter.predict_batch(images, want_features)
