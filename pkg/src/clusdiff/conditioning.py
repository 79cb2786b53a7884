"""Sub-class labels, their empirical frequencies, and distribution-matched generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from clusdiff.apcluster import ClassClusters
from clusdiff.data import ImageSet, from_model_space, to_model_space
from clusdiff.diffusion import NoiseSchedule, sample_loop
from clusdiff.errors import DataError, MissingArtifactError, VocabularyError
from clusdiff.latentcodec import Codec
from clusdiff.nncore import Rng
from clusdiff.parallel import ordered_map

GENERATE_CHUNK = 32


@dataclass(frozen=True, order=True)
class SubClassLabel:
    class_name: str
    cluster_id: int

    def __post_init__(self):
        if not isinstance(self.cluster_id, (int, np.integer)) or self.cluster_id < 1:
            raise DataError(f"cluster id must be a positive integer, got {self.cluster_id!r}")
        if not self.class_name:
            raise DataError("class name must be nonempty")

    def __str__(self) -> str:
        return f"{self.class_name}_{self.cluster_id}"

    @classmethod
    def parse(cls, text: str) -> "SubClassLabel":
        """Split on the last underscore so class names may contain underscores."""
        head, sep, tail = text.rpartition("_")
        if not sep or not tail.isdigit():
            raise DataError(f"not a sub-class label: {text!r}")
        return cls(head, int(tail))


@dataclass
class SubClassDistribution:
    """Per class: ``(cluster_id, count, probability)`` rows sorted by cluster id."""

    rows: Dict[str, List[Tuple[int, int, float]]] = field(default_factory=dict)

    @property
    def classes(self) -> List[str]:
        return list(self.rows)

    def entries(self, class_name: str) -> List[Tuple[int, int, float]]:
        if class_name not in self.rows:
            raise VocabularyError(f"class {class_name!r} has no sub-class distribution")
        return self.rows[class_name]

    def probabilities(self, class_name: str) -> np.ndarray:
        return np.array([p for _, _, p in self.entries(class_name)])

    def labels(self, class_name: str) -> List[str]:
        return [str(SubClassLabel(class_name, c)) for c, _, _ in self.entries(class_name)]

    def vocabulary(self) -> List[str]:
        return [lab for cls in self.rows for lab in self.labels(cls)]

    @classmethod
    def from_counts(cls, counts: Dict[str, Dict[int, int]]) -> "SubClassDistribution":
        rows = {}
        for name, by_cluster in counts.items():
            total = sum(by_cluster.values())
            if total <= 0:
                raise DataError(f"class {name!r} has no samples")
            rows[name] = [(c, n, n / total) for c, n in sorted(by_cluster.items())]
        return cls(rows)

    def save(self, path) -> None:
        lines = ["# clusdiff subclass distribution v1", "class\tcluster_id\tcount\tprobability"]
        for name, entries in self.rows.items():
            for c, n, p in entries:
                lines.append(f"{name}\t{c}\t{n}\t{p!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SubClassDistribution":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path)
        counts: Dict[str, Dict[int, int]] = {}
        for line in path.read_text().splitlines():
            if not line or line.startswith("#") or line.startswith("class\t"):
                continue
            name, c, n, _ = line.split("\t")
            counts.setdefault(name, {})[int(c)] = int(n)
        return cls.from_counts(counts)


@dataclass
class LabeledLatentDataset:
    """Encoded samples with their sub-class label and original class."""

    z: np.ndarray
    labels: List[str]
    classes: List[str]
    ids: List[str]

    def __len__(self) -> int:
        return len(self.ids)


def assign_subclasses(data: ImageSet, clusters: Dict[str, ClassClusters], codec: Optional[Codec] = None) -> LabeledLatentDataset:
    """Relabel each sample ``class_clusterID`` and encode it into the working space."""
    codec = codec or Codec(channels=data.images.shape[1] if len(data) else 1)
    lookup: Dict[Tuple[str, str], int] = {}
    for cls, cc in clusters.items():
        for sid, cid in zip(cc.ids, cc.cluster_ids):
            lookup[(cls, sid)] = cid
    labels = []
    for sid, cls in zip(data.ids, data.classes):
        if (cls, sid) not in lookup:
            raise DataError(f"sample {sid!r} of class {cls!r} has no cluster assignment")
        labels.append(str(SubClassLabel(cls, lookup[(cls, sid)])))
    z = codec.encode(to_model_space(data.images)) if len(data) else data.images
    return LabeledLatentDataset(z, labels, list(data.classes), list(data.ids))


def single_cluster_clusters(data: ImageSet) -> Dict[str, ClassClusters]:
    """Every sample in cluster 1: the plain class-conditioned baseline."""
    out = {}
    for cls in data.class_names:
        ids = [data.ids[i] for i in data.indices_of(cls)]
        out[cls] = ClassClusters(cls, ids, [1] * len(ids), [ids[0]] * len(ids), True, 0)
    return out


def empirical_distribution(labels: Sequence[str]) -> SubClassDistribution:
    """Frequencies of sub-class labels (a dataset's ``labels`` list) per class."""
    counts: Dict[str, Dict[int, int]] = {}
    for text in labels:
        lab = SubClassLabel.parse(text)
        by = counts.setdefault(lab.class_name, {})
        by[lab.cluster_id] = by.get(lab.cluster_id, 0) + 1
    return SubClassDistribution.from_counts(counts)


def sample_label(class_name: str, dist: SubClassDistribution, rng: Rng) -> SubClassLabel:
    """One categorical draw over the class's sub-classes."""
    entries = dist.entries(class_name)
    cum = np.cumsum([p for _, _, p in entries])
    u = rng.generator().random() * cum[-1]
    k = min(int(np.searchsorted(cum, u, side="right")), len(entries) - 1)
    return SubClassLabel(class_name, entries[k][0])


@dataclass
class GeneratedBatch:
    images: np.ndarray  # [n, C, H, W] in [0, 1]
    labels: List[str]
    class_name: str


def generate(
    class_name: str,
    n: int,
    model,
    codec: Optional[Codec],
    sched: NoiseSchedule,
    dist: SubClassDistribution,
    rng: Rng,
) -> GeneratedBatch:
    """Draw one sub-class label per image, sample its reverse chain, decode.

    Image ``i`` takes its label from stream ``("label", i)`` and its chain
    noise from ``("chain", i)``; chunks of fixed size run via the task pool,
    so results do not depend on the thread count.
    """
    dist.entries(class_name)
    codec = codec or Codec(channels=model.config.in_channels)
    cfg = model.config
    shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
    labels = [str(sample_label(class_name, dist, rng.child("label", i))) for i in range(n)]
    if n == 0:
        c = codec.channels
        return GeneratedBatch(np.zeros((0, c, cfg.image_size * codec.factor, cfg.image_size * codec.factor)), [], class_name)
    chains = rng.child("chain")

    def run_chunk(start: int) -> np.ndarray:
        idx = list(range(start, min(start + GENERATE_CHUNK, n)))
        fn = model.eps_fn([labels[i] for i in idx])
        return sample_loop(fn, None, sched, chains, (len(idx),) + shape, cfg.np_dtype, stream_ids=idx)

    z = np.concatenate(ordered_map(run_chunk, range(0, n, GENERATE_CHUNK)))
    images = from_model_space(codec.decode(z).astype(np.float64))
    return GeneratedBatch(images, labels, class_name)
