"""Fréchet distance between feature Gaussians, mode recall, and head/tail accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from clusdiff.errors import ConfigError, DataError, NumericError, ShapeError
from clusdiff.features import FeatureExtractor, FeatureMatrix, normalize_rows

RIDGE = 1e-6
ASYMMETRY_TOL = 1e-8
MODE_RECALL_THRESHOLD = 0.2


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def fit_gaussian(z, ridge: float = RIDGE) -> GaussianStats:
    """Sample mean and covariance (denominator N - 1) plus ``ridge * I``."""
    z = np.asarray(z.z if isinstance(z, FeatureMatrix) else z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise DataError("a Gaussian fit needs at least two feature rows")
    mu = z.mean(axis=0)
    d = z - mu
    sigma = d.T @ d / (z.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T) + ridge * np.eye(z.shape[1])
    return GaussianStats(mu, sigma, z.shape[0])


def matrix_sqrt_psd(S) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, negative eigenvalues clipped."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"matrix square root needs a square matrix, got {S.shape}")
    asym = np.abs(S - S.T).max() if S.size else 0.0
    if asym > ASYMMETRY_TOL:
        raise NumericError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return 0.5 * (root + root.T)


def frechet_distance(g1: GaussianStats, g2: GaussianStats) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)``, clipped at 0."""
    if g1.dim != g2.dim:
        raise ShapeError(f"feature dims differ: {g1.dim} vs {g2.dim}")
    r1 = matrix_sqrt_psd(g1.sigma)
    M = r1 @ g2.sigma @ r1
    M = 0.5 * (M + M.T)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(M), 0.0, None)).sum()
    diff = g1.mu - g2.mu
    d2 = diff @ diff + np.trace(g1.sigma) + np.trace(g2.sigma) - 2.0 * cross
    return float(max(d2, 0.0))


@dataclass
class FIDReport:
    per_class: Dict[str, float]
    pooled: float
    extractor_checksum: str

    def rows(self) -> List[tuple]:
        return [(c, d) for c, d in self.per_class.items()] + [("pooled", self.pooled)]


def fid_report(
    real_images,
    real_classes: Sequence[str],
    gen_images,
    gen_classes: Sequence[str],
    extractor: FeatureExtractor,
) -> FIDReport:
    """Per-class and pooled Fréchet distances in the extractor's feature space."""
    fr = extractor.extract(real_images, labels=real_classes)
    fg = extractor.extract(gen_images, labels=gen_classes)
    return fid_from_features(fr, fg, extractor.checksum())


def fid_from_features(real: FeatureMatrix, gen: FeatureMatrix, checksum: str = "") -> FIDReport:
    per = {}
    for cls in real.class_names():
        if cls not in gen.labels:
            continue
        per[cls] = frechet_distance(fit_gaussian(real.rows_for(cls)), fit_gaussian(gen.rows_for(cls)))
    pooled = frechet_distance(fit_gaussian(real), fit_gaussian(gen))
    return FIDReport(per, pooled, checksum)


def mode_recall(generated, prototypes, threshold: float = MODE_RECALL_THRESHOLD) -> float:
    """Fraction of prototypes with a generated feature within cosine distance ``threshold``."""
    P = np.asarray(prototypes, dtype=np.float64)
    if P.ndim != 2 or len(P) == 0:
        raise DataError("mode recall needs at least one prototype")
    G = np.asarray(generated, dtype=np.float64)
    if G.size == 0:
        return 0.0
    D = 1.0 - normalize_rows(P) @ normalize_rows(G).T
    return float(np.mean(D.min(axis=1) <= threshold))


@dataclass
class LTMetrics:
    head: float
    tail: float
    overall: float
    head_classes: List[str]
    per_class: Dict[str, float]

    def row(self, name: str) -> str:
        return f"{name:<24}{self.head:>8.1f}{self.tail:>8.1f}{self.overall:>9.1f}"


def lt_accuracy(predictions: Sequence[str], labels: Sequence[str], head_classes, classes: Optional[Sequence[str]] = None) -> LTMetrics:
    """Macro-averaged top-1 accuracy (percent) over head, tail and all classes."""
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise DataError("predictions and labels differ in length")
    classes = list(classes) if classes is not None else sorted(set(labels))
    head = sorted(set(head_classes))
    unknown = [c for c in head if c not in classes]
    if unknown:
        raise ConfigError(f"head classes not in the class set: {unknown}")
    pred = np.asarray(predictions, dtype=object)
    lab = np.asarray(labels, dtype=object)
    per = {}
    for c in classes:
        mask = lab == c
        if not mask.any():
            raise DataError(f"class {c!r} has no test samples")
        per[c] = 100.0 * float(np.mean(pred[mask] == c))
    tail = [c for c in classes if c not in head]
    head_acc = float(np.mean([per[c] for c in head])) if head else 0.0
    tail_acc = float(np.mean([per[c] for c in tail])) if tail else 0.0
    overall = float(np.mean([per[c] for c in classes]))
    return LTMetrics(head_acc, tail_acc, overall, head, per)


def format_lt_table(rows: Mapping[str, LTMetrics]) -> str:
    lines = [f"{'method':<24}{'head':>8}{'tail':>8}{'overall':>9}"]
    lines += [m.row(name) for name, m in rows.items()]
    return "\n".join(lines) + "\n"


# report files -------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_kv_report(path, values: Mapping[str, object]) -> None:
    """Flat ``key = value`` lines in insertion order."""
    Path(path).write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in values.items()))


def read_kv_report(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out


def write_records(path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    lines = ["\t".join(header)] + ["\t".join(_fmt(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
