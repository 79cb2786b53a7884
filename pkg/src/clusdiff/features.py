"""Feature vectors for clustering and evaluation.

A small conv classifier is trained on class labels; its penultimate
activations, L2-normalised, are the feature vectors.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from clusdiff import checkpoint
from clusdiff.errors import DataError, MissingArtifactError, NumericError, ShapeError, VocabularyError
from clusdiff.nncore import AdamState, Conv2d, Linear, Module, Rng, Tensor, adam_step, no_grad, ops
from clusdiff.parallel import ordered_map

log = logging.getLogger(__name__)

FEATURE_DIM = 32
EXTRACT_CHUNK = 64
FEATURE_MAGIC = b"CDFT"


class Classifier(Module):
    """conv(s1) -> conv(s2) -> conv(s2) -> 2x2 pool -> linear -> silu [tap] -> linear."""

    def __init__(self, n_classes: int, rng: Rng, image_size: int = 24, channels: int = 1, d_f: int = FEATURE_DIM, width: int = 16, dtype=np.float32):
        if image_size % 8:
            raise ShapeError(f"image size must be a multiple of 8, got {image_size}")
        self.image_size = image_size
        self.in_channels = channels
        self.d_f = d_f
        half = width // 2
        self.c1 = Conv2d(channels, half, rng.child("c1"), dtype=dtype)
        self.c2 = Conv2d(half, width, rng.child("c2"), stride=2, dtype=dtype)
        self.c3 = Conv2d(width, width, rng.child("c3"), stride=2, dtype=dtype)
        flat = width * (image_size // 8) ** 2
        self.fc = Linear(flat, d_f, rng.child("fc"), dtype=dtype)
        self.head = Linear(d_f, n_classes, rng.child("head"), dtype=dtype)
        self.assign_ids()

    def penultimate(self, x: Tensor) -> Tensor:
        h = ops.relu(self.c1(x))
        h = ops.relu(self.c2(h))
        h = ops.relu(self.c3(h))
        h = ops.avg_pool(h, 2)
        h = h.reshape(h.shape[0], -1)
        return ops.silu(self.fc(h))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.penultimate(x))


@dataclass
class FeatureMatrix:
    """Unit-norm rows ``z`` with parallel sample ids and class labels."""

    z: np.ndarray
    ids: List[str]
    labels: List[str]

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.size == 0 and self.z.ndim != 2:
            self.z = self.z.reshape(0, 0)
        if self.z.ndim != 2 or self.z.shape[0] != len(self.ids) or len(self.labels) != len(self.ids):
            raise DataError("feature rows, ids and labels disagree in length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def class_names(self) -> List[str]:
        return list(dict.fromkeys(self.labels))

    def rows_for(self, cls: str) -> "FeatureMatrix":
        idx = [i for i, c in enumerate(self.labels) if c == cls]
        return FeatureMatrix(self.z[idx], [self.ids[i] for i in idx], [cls] * len(idx))


def normalize_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if z.size and (norms == 0).any():
        bad = int(np.flatnonzero(norms[:, 0] == 0)[0])
        raise NumericError(f"feature row {bad} is the zero vector and cannot be normalised")
    return z / norms if z.size else z


class FeatureExtractor:
    """Trained classifier plus the class vocabulary it was fitted on."""

    def __init__(self, model: Classifier, class_names: Sequence[str]):
        self.model = model
        self.class_names = list(class_names)

    @property
    def d_f(self) -> int:
        return self.model.d_f

    def _check(self, images: np.ndarray) -> None:
        m = self.model
        want = (m.in_channels, m.image_size, m.image_size)
        if images.ndim != 4 or images.shape[1:] != want:
            raise ShapeError(f"images {images.shape} do not match extractor input [N, {want[0]}, {want[1]}, {want[2]}]")

    def _chunk(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.model.penultimate(Tensor(x.astype(np.float32))).data

    def raw_features(self, images) -> np.ndarray:
        images = np.asarray(images)
        self._check(images)
        if len(images) == 0:
            return np.zeros((0, self.d_f))
        # chunk boundaries are fixed, so the result never depends on thread count
        chunks = [images[i:i + EXTRACT_CHUNK] for i in range(0, len(images), EXTRACT_CHUNK)]
        return np.concatenate(ordered_map(self._chunk, chunks)).astype(np.float64)

    def extract(self, images, ids: Optional[Sequence[str]] = None, labels: Optional[Sequence[str]] = None) -> FeatureMatrix:
        """Unit-norm penultimate features of ``images`` (pixels in [0, 1])."""
        z = normalize_rows(self.raw_features(images))
        n = len(z)
        ids = list(ids) if ids is not None else [str(i) for i in range(n)]
        labels = list(labels) if labels is not None else [""] * n
        return FeatureMatrix(z, ids, labels)

    def predict(self, images) -> List[str]:
        images = np.asarray(images)
        self._check(images)
        out = []
        for i in range(0, len(images), EXTRACT_CHUNK):
            with no_grad():
                logits = self.model(Tensor(images[i:i + EXTRACT_CHUNK].astype(np.float32))).data
            out.extend(self.class_names[j] for j in np.argmax(logits, axis=1))
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.class_names).encode())
        for name, arr in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        m = self.model
        manifest = {
            "classes": self.class_names,
            "image_size": m.image_size,
            "channels": m.in_channels,
            "d_f": m.d_f,
            "width": int(m.c3.b.shape[0]),
        }
        checkpoint.save(path, "extractor", manifest, m.state_dict())

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        if not Path(path).exists():
            raise MissingArtifactError(path)
        man, state = checkpoint.load(path, expect_kind="extractor")
        model = Classifier(len(man["classes"]), Rng(0), man["image_size"], man["channels"], man["d_f"], man["width"])
        model.load_state_dict(state)
        return cls(model, man["classes"])


@dataclass
class ClassifierReport:
    extractor: FeatureExtractor
    train_accuracy: float
    losses: List[float] = field(default_factory=list)


def label_indices(labels: Sequence[str], class_names: Sequence[str]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(class_names)}
    try:
        return np.array([lookup[c] for c in labels], dtype=np.int64)
    except KeyError as e:
        raise VocabularyError(f"unknown class label {e.args[0]!r}") from None


def train_classifier(
    images,
    labels: Sequence[str],
    epochs: int,
    rng: Rng,
    opt: Optional[AdamState] = None,
    class_names: Optional[Sequence[str]] = None,
    lr: float = 2e-3,
    batch_size: int = 32,
    d_f: int = FEATURE_DIM,
) -> ClassifierReport:
    """Fit the feature classifier on pixel images in [0, 1] with cross-entropy."""
    images = np.asarray(images)
    labels = list(labels)
    class_names = list(class_names) if class_names is not None else sorted(set(labels))
    if len(class_names) < 2 or len(set(labels)) < 2:
        raise DataError("classifier training needs at least two classes")
    if images.ndim != 4 or images.shape[0] != len(labels):
        raise DataError("need one label per [C, H, W] image")
    y = label_indices(labels, class_names)
    model = Classifier(len(class_names), rng.child("init"), images.shape[-1], images.shape[1], d_f)
    params = model.parameters()
    opt = opt if opt is not None else AdamState.for_params(params, lr=lr)
    x = images.astype(np.float32)
    n = len(y)
    losses = []
    for epoch in range(epochs):
        order = rng.child("perm", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = ops.cross_entropy(model(Tensor(x[idx])), y[idx])
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(f"non-finite classifier loss at epoch {epoch}")
            loss.backward()
            adam_step(params, opt)
            losses.append(val)
    ext = FeatureExtractor(model, class_names)
    pred = ext.predict(images)
    acc = float(np.mean([p == t for p, t in zip(pred, labels)]))
    log.info("classifier train accuracy %.4f", acc)
    return ClassifierReport(ext, acc, losses)


def cosine_distance(zi, zj) -> float:
    """``1 - cos(zi, zj)``, clipped to [0, 2]."""
    zi = np.asarray(zi, dtype=np.float64).ravel()
    zj = np.asarray(zj, dtype=np.float64).ravel()
    ni, nj = np.linalg.norm(zi), np.linalg.norm(zj)
    if ni == 0 or nj == 0:
        raise NumericError("cosine distance is undefined for a zero vector")
    return float(np.clip(1.0 - (zi @ zj) / (ni * nj), 0.0, 2.0))


def pairwise_cosine_distance(a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    a = normalize_rows(a)
    b = a if b is None else normalize_rows(b)
    return np.clip(1.0 - a @ b.T, 0.0, 2.0)


# feature file ------------------------------------------------------------------

def _write_str(f, s: str) -> None:
    raw = s.encode()
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode()


def save_features(path, fm: FeatureMatrix) -> None:
    """``CDFT`` | u32 N | u32 d_f | f32 rows | (id, label) string pairs."""
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", len(fm), fm.dim))
        f.write(np.ascontiguousarray(fm.z, dtype="<f4").tobytes())
        for sid, lab in zip(fm.ids, fm.labels):
            _write_str(f, sid)
            _write_str(f, lab)


def load_features(path) -> FeatureMatrix:
    """Read a feature file; rows are re-normalised in float64 after the f32 round trip."""
    if not Path(path).exists():
        raise MissingArtifactError(path)
    with open(path, "rb") as f:
        if f.read(4) != FEATURE_MAGIC:
            raise DataError(f"{path}: not a feature file")
        n, d = struct.unpack("<II", f.read(8))
        raw = f.read(4 * n * d)
        if len(raw) != 4 * n * d:
            raise DataError(f"{path}: truncated feature rows")
        z = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
        ids, labels = [], []
        for _ in range(n):
            ids.append(_read_str(f))
            labels.append(_read_str(f))
    return FeatureMatrix(normalize_rows(z) if n else z, ids, labels)
