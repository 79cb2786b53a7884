"""Long-tailed classification study: imbalanced splits, ROS/RUS, synthetic balancing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from clusdiff.data import ImageSet, quantize
from clusdiff.errors import ConfigError, DataError
from clusdiff.evaluation import LTMetrics, lt_accuracy
from clusdiff.features import train_classifier
from clusdiff.nncore import Rng

HEAD_COUNT = 200
TAIL_COUNT = 10
TEST_PER_CLASS = 25


@dataclass
class LongTailSpec:
    counts: Dict[str, int]
    test_per_class: int = TEST_PER_CLASS
    head_threshold: Optional[int] = None

    def __post_init__(self):
        if not self.counts:
            raise ConfigError("long-tail spec needs at least one class")
        if min(self.counts.values()) < 1:
            raise ConfigError("every class needs at least one training sample")
        if self.test_per_class < 1:
            raise ConfigError("test quota must be positive")

    @property
    def threshold(self) -> float:
        if self.head_threshold is not None:
            return self.head_threshold
        return (max(self.counts.values()) + min(self.counts.values())) / 2.0

    @property
    def head_classes(self) -> List[str]:
        if max(self.counts.values()) == min(self.counts.values()):
            return list(self.counts)
        return [c for c, n in self.counts.items() if n > self.threshold]

    @property
    def tail_classes(self) -> List[str]:
        head = set(self.head_classes)
        return [c for c in self.counts if c not in head]

    @classmethod
    def toy(cls, classes: Sequence[str], n_head: int = 2) -> "LongTailSpec":
        """First ``n_head`` classes at 200 samples, the rest at 10, 25 test each."""
        return cls({c: HEAD_COUNT if i < n_head else TAIL_COUNT for i, c in enumerate(classes)})


def make_longtail(source: ImageSet, spec: LongTailSpec, rng: Rng) -> Tuple[ImageSet, ImageSet]:
    """Per class: shuffle, take the test quota, then the training count."""
    train_idx, test_idx = [], []
    for cls, count in spec.counts.items():
        idx = source.indices_of(cls)
        need = count + spec.test_per_class
        if len(idx) < need:
            raise DataError(f"class {cls!r} has {len(idx)} samples, need {need}")
        order = rng.child("split", cls).permutation(len(idx))
        picked = [idx[i] for i in order]
        test_idx += picked[:spec.test_per_class]
        train_idx += picked[spec.test_per_class:need]
    return source.subset(train_idx), source.subset(test_idx)


Generator = Callable[[str, int, Rng], Tuple[np.ndarray, List[str]]]


def balance_with_synthetic(train: ImageSet, generator: Generator, target: int, rng: Rng) -> ImageSet:
    """Top every class up to ``target`` with generated images tagged synthetic.

    ``generator(class_name, n, rng)`` returns ``n`` images in [0, 1] and their
    drawn sub-class labels. Generated pixels are quantised to 8 bits like real ones.
    """
    parts = [train]
    for cls in train.class_names:
        have = len(train.indices_of(cls))
        n = target - have
        if n <= 0:
            continue
        images, labels = generator(cls, n, rng.child("synth", cls))
        if len(images) != n or len(labels) != n:
            raise DataError(f"generator returned {len(images)} images for {n} requested")
        parts.append(
            ImageSet(
                images=quantize(np.asarray(images, dtype=np.float64)),
                ids=[f"syn-{cls}-{k:04d}" for k in range(n)],
                classes=[cls] * n,
                modes=[None] * n,
                synthetic=[True] * n,
                subclass=list(labels),
            )
        )
    return ImageSet.concat(parts)


def ros(train: ImageSet, target: int, rng: Rng) -> ImageSet:
    """Random over-sampling: duplicate random members of each class up to ``target``."""
    parts = [train]
    for cls in train.class_names:
        idx = train.indices_of(cls)
        if not idx:
            raise DataError(f"class {cls!r} is empty")
        n = target - len(idx)
        if n <= 0:
            continue
        draw = rng.child("ros", cls).integers(0, len(idx), size=n)
        src = [idx[i] for i in draw]
        parts.append(
            ImageSet(
                images=train.images[src],
                ids=[f"{train.ids[j]}#dup{k}" for k, j in enumerate(src)],
                classes=[cls] * n,
                modes=[train.modes[j] for j in src],
                synthetic=[train.synthetic[j] for j in src],
                subclass=[train.subclass[j] for j in src],
            )
        )
    return ImageSet.concat(parts)


def rus(train: ImageSet, rng: Rng) -> ImageSet:
    """Random under-sampling of every class to the smallest class count."""
    groups = {cls: train.indices_of(cls) for cls in train.class_names}
    if any(len(g) == 0 for g in groups.values()):
        raise DataError("every class needs samples")
    floor = min(len(g) for g in groups.values())
    keep = []
    for cls, idx in groups.items():
        order = rng.child("rus", cls).permutation(len(idx))
        keep += sorted(idx[i] for i in order[:floor])
    return train.subset(keep)


@dataclass
class LTRun:
    metrics: LTMetrics
    train_counts: Dict[str, int] = field(default_factory=dict)
    train_accuracy: float = 0.0


def train_and_eval(
    train: ImageSet,
    test: ImageSet,
    head_classes: Sequence[str],
    epochs: int,
    rng: Rng,
    classes: Optional[Sequence[str]] = None,
    allow_overlap: bool = False,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> LTRun:
    """Fit the feature-classifier architecture on ``train``; score ``test``.

    ``allow_overlap`` exists only for memorisation sanity checks.
    """
    overlap = set(train.ids) & set(test.ids)
    if overlap and not allow_overlap:
        raise DataError(f"train and test share {len(overlap)} sample ids")
    classes = list(classes) if classes is not None else sorted(set(train.classes) | set(test.classes))
    rep = train_classifier(train.images, train.classes, epochs, rng, class_names=classes, lr=lr, batch_size=batch_size)
    pred = rep.extractor.predict(test.images)
    metrics = lt_accuracy(pred, test.classes, head_classes, classes)
    return LTRun(metrics, train.counts(), rep.train_accuracy)
