"""Affinity propagation over per-class feature vectors.

Similarity is the negated cosine distance, so larger means more similar. The
diagonal holds the preference (default: median off-diagonal similarity).
Responsibilities and availabilities start at zero and are damped each
iteration; ties are always resolved towards the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from clusdiff.errors import ConfigError, DataError, MissingArtifactError
from clusdiff.features import FeatureMatrix, normalize_rows


@dataclass(frozen=True)
class APConfig:
    damping: float = 0.5
    max_iter: int = 200
    window: int = 15
    preference: Union[str, float] = "median"

    def validate(self) -> None:
        if not 0.5 <= self.damping < 1.0:
            raise ConfigError(f"damping must be in [0.5, 1), got {self.damping}")
        if self.max_iter < 1 or self.window < 1 or self.window > self.max_iter:
            raise ConfigError("need 1 <= window <= max_iter")
        if isinstance(self.preference, str) and self.preference != "median":
            raise ConfigError(f"unknown preference policy {self.preference!r}")


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # exemplar index per sample
    exemplars: List[int]
    converged: bool
    iterations: int


def build_similarity(z: np.ndarray, preference: Union[str, float] = "median") -> np.ndarray:
    """``s(i, j) = -(1 - cos(z_i, z_j))`` off the diagonal; preference on it."""
    z = normalize_rows(z)
    n = len(z)
    if n == 0:
        raise DataError("similarity needs at least one sample")
    S = -(1.0 - z @ z.T)
    S = np.minimum(S, 0.0)
    off = ~np.eye(n, dtype=bool)
    if isinstance(preference, str):
        pref = float(np.median(S[off])) if n > 1 else 0.0
    else:
        pref = float(preference)
    np.fill_diagonal(S, pref)
    return S


def update_responsibility(S: np.ndarray, R: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``r(i,j) = s(i,j) - max_{j' != j} (a(i,j') + s(i,j'))``."""
    n = S.shape[0]
    AS = A + S
    rows = np.arange(n)
    first = np.argmax(AS, axis=1)
    top = AS[rows, first]
    masked = AS.copy()
    masked[rows, first] = -np.inf
    second = masked.max(axis=1) if n > 1 else np.full(n, -np.inf)
    best_other = np.repeat(top[:, None], n, axis=1)
    best_other[rows, first] = second
    return S - best_other


def update_availability(R: np.ndarray, A: Optional[np.ndarray] = None) -> np.ndarray:
    """``a(i,j) = min(0, r(j,j) + sum_{i' not in {i,j}} max(0, r(i',j)))``; ``a(j,j) = sum_{i' != j} max(0, r(i',j))``."""
    n = R.shape[0]
    Rp = np.maximum(R, 0.0)
    d = np.arange(n)
    Rp[d, d] = R[d, d]
    col = Rp.sum(axis=0)
    A_new = col[None, :] - Rp
    diag = A_new[d, d].copy()
    A_new = np.minimum(A_new, 0.0)
    A_new[d, d] = diag
    return A_new


def damped_update(old, new, damping: float):
    return damping * old + (1.0 - damping) * new


def exemplar_set(R: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.diag(R) + np.diag(A) > 0)


def assign(S: np.ndarray, exemplars: Sequence[int]) -> np.ndarray:
    ex = np.asarray(sorted(exemplars), dtype=np.int64)
    labels = ex[np.argmax(S[:, ex], axis=1)]
    labels[ex] = ex
    return labels


def run(
    S: np.ndarray,
    config: APConfig = APConfig(),
    trace: Optional[Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]] = None,
) -> ClusterAssignment:
    """Run damped message passing on a prepared similarity matrix.

    ``trace(iteration, R, A, exemplars)`` is called after every iteration.
    Without convergence the last exemplar set is used; if it is empty the
    sample with the largest ``r(k,k) + a(k,k)`` becomes the only exemplar.
    """
    config.validate()
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    if n == 0:
        raise DataError("affinity propagation needs at least one sample")
    if not np.isfinite(S).all():
        raise DataError("similarity matrix has non-finite entries")
    if n == 1:
        # the competing-candidate max is empty; a lone point is its own exemplar
        return ClusterAssignment(np.zeros(1, dtype=np.int64), [0], True, 0)
    R = np.zeros_like(S)
    A = np.zeros_like(S)
    lam = config.damping
    prev = None
    stable = 0
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        R = damped_update(R, update_responsibility(S, R, A), lam)
        A = damped_update(A, update_availability(R, A), lam)
        ex = exemplar_set(R, A)
        if trace is not None:
            trace(it, R, A, ex)
        if prev is not None and np.array_equal(ex, prev):
            stable += 1
        else:
            stable = 0
        prev = ex
        if stable >= config.window and len(ex) > 0:
            converged = True
            break
    ex = exemplar_set(R, A)
    if len(ex) == 0:
        ex = np.array([int(np.argmax(np.diag(R) + np.diag(A)))])
    return ClusterAssignment(assign(S, ex), [int(k) for k in ex], converged, it)


def run_features(z: np.ndarray, config: APConfig = APConfig()) -> ClusterAssignment:
    return run(build_similarity(z, config.preference), config)


@dataclass
class ClassClusters:
    """Per-class result with cluster ids renumbered 1..K."""

    cls: str
    ids: List[str]
    cluster_ids: List[int]
    exemplar_ids: List[str]
    converged: bool
    iterations: int

    @property
    def k(self) -> int:
        return len(set(self.cluster_ids))


def renumber(labels: Sequence[int]) -> List[int]:
    """Map exemplar indices to 1..K in order of first appearance."""
    order: Dict[int, int] = {}
    for lab in labels:
        if lab not in order:
            order[lab] = len(order) + 1
    return [order[lab] for lab in labels]


def cluster_per_class(fm: FeatureMatrix, config: APConfig = APConfig()) -> Dict[str, ClassClusters]:
    out: Dict[str, ClassClusters] = {}
    for cls in fm.class_names():
        sub = fm.rows_for(cls)
        res = run_features(sub.z, config)
        out[cls] = ClassClusters(
            cls=cls,
            ids=list(sub.ids),
            cluster_ids=renumber(res.labels.tolist()),
            exemplar_ids=[sub.ids[k] for k in res.labels],
            converged=res.converged,
            iterations=res.iterations,
        )
    return out


# assignment file ---------------------------------------------------------------

ASSIGN_HEADER = ("id", "class", "cluster_id", "exemplar_id")


def save_assignments(path, clusters: Dict[str, ClassClusters]) -> None:
    """TSV records, then one ``# K`` summary line per class."""
    lines = ["# clusdiff assignments v1", "\t".join(ASSIGN_HEADER)]
    for cc in clusters.values():
        for sid, cid, ex in zip(cc.ids, cc.cluster_ids, cc.exemplar_ids):
            lines.append(f"{sid}\t{cc.cls}\t{cid}\t{ex}")
    for cc in clusters.values():
        lines.append(f"# K\t{cc.cls}\t{cc.k}\tconverged={int(cc.converged)}\titerations={cc.iterations}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_assignments(path) -> Dict[str, ClassClusters]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    recs: Dict[str, ClassClusters] = {}
    meta: Dict[str, tuple] = {}
    for line in path.read_text().splitlines():
        if line.startswith("# K\t"):
            _, cls, _k, conv, iters = line.split("\t")
            meta[cls] = (conv.endswith("1"), int(iters.split("=")[1]))
            continue
        if not line or line.startswith("#") or line.startswith("id\t"):
            continue
        sid, cls, cid, ex = line.split("\t")
        cc = recs.setdefault(cls, ClassClusters(cls, [], [], [], False, 0))
        cc.ids.append(sid)
        cc.cluster_ids.append(int(cid))
        cc.exemplar_ids.append(ex)
    for cls, (conv, iters) in meta.items():
        if cls in recs:
            recs[cls].converged = conv
            recs[cls].iterations = iters
    return recs
