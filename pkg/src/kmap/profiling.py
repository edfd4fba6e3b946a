"""Stateful carry-over between segments and cluster-based student profiling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .model import CarryState
from .numcore import Tensor
from .numcore import functional as F


class StateStore:
    """Terminal segment state per student, stored detached."""

    def __init__(self):
        self._states: Dict[int, CarryState] = {}
        self.segments_seen: Dict[int, int] = {}

    def __contains__(self, student: int) -> bool:
        return student in self._states

    def get(self, student: int) -> Optional[CarryState]:
        return self._states.get(student)

    def put(self, student: int, state: CarryState) -> None:
        self._states[student] = CarryState(*(np.array(getattr(state, f), copy=True) for f in CarryState._fields()))
        self.segments_seen[student] = self.segments_seen.get(student, 0) + 1

    def clear(self) -> None:
        self._states.clear()
        self.segments_seen.clear()


def init_segment_state(network, store: StateStore, students, first_batch, rng: np.random.Generator) -> CarryState:
    """Initial state per student: fresh for a first segment, else the stored
    terminal state of the previous segment."""
    fresh = network.initial_state(len(students), rng)
    rows = []
    for i, (student, first) in enumerate(zip(students, first_batch)):
        prior = None if first else store.get(int(student))
        rows.append(fresh.row(i) if prior is None else prior)
    return CarryState.stack(rows)


@dataclass
class ProfileLedger:
    """Per-epoch record of segment-specific embeddings and behaviour states."""

    snapshots: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    offsets: Dict[int, List[np.ndarray]] = field(default_factory=dict)
    behaviors: Dict[int, List[np.ndarray]] = field(default_factory=dict)

    def record_segment(self, student: int, base: np.ndarray, grad: np.ndarray, lr: float, h_terminal: np.ndarray) -> np.ndarray:
        """Store ``base - lr * grad`` as the student's next snapshot."""
        offset = -lr * np.asarray(grad, dtype=np.float64)
        s_new = np.asarray(base, dtype=np.float64) + offset
        self.snapshots.setdefault(student, []).append(s_new)
        self.offsets.setdefault(student, []).append(offset)
        self.behaviors.setdefault(student, []).append(np.array(h_terminal, dtype=np.float64))
        return s_new

    @property
    def students(self) -> List[int]:
        return sorted(self.snapshots)

    def clear(self) -> None:
        self.snapshots.clear()
        self.offsets.clear()
        self.behaviors.clear()


def row_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def normalized_mean(rows) -> np.ndarray:
    return row_normalize(np.asarray(rows, dtype=np.float64)).mean(axis=0)


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia_history: List[float]
    n_iter: int

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(x, np.array(centers)).min(axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
    return np.array(centers, dtype=np.float64)


def kmeans(x, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    An emptied cluster is re-seeded at the point farthest from its current
    centroid. Stops when the squared centre shift is at most ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    if k > len(x):
        raise ValueError(f"n_clusters={k} exceeds the number of points ({len(x)})")
    if k < 1:
        raise ValueError("n_clusters must be positive")
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(x, k, rng)
    history = []
    labels = np.zeros(len(x), dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        new = centers.copy()
        point_d2 = d2[np.arange(len(x)), labels]
        taken = set()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                order = np.argsort(-point_d2, kind="stable")
                far = next((i for i in order if i not in taken), order[0])
                taken.add(far)
                new[j] = x[far]
                point_d2[far] = 0.0
        shift = float(((new - centers) ** 2).sum())
        centers = new
        if shift <= tol:
            break
    d2 = _sq_dists(x, centers)
    final = d2.argmin(axis=1)
    final_inertia = float(d2[np.arange(len(x)), final].sum())
    if not np.array_equal(final, labels) or final_inertia < history[-1]:
        labels = final
        history.append(final_inertia)
    return KMeansResult(labels, centers, history, n_iter)


# ---------------------------------------------------------------------------
# clustering of the epoch's profiles


@dataclass
class ClusterResult:
    students: List[int]
    v_bar: np.ndarray              # (S, d_s)
    b_bar: np.ndarray              # (S, d_h)
    labels: np.ndarray             # (S,)
    centers: np.ndarray            # behaviour-space centroids (C, d_h)
    centroid_embeddings: np.ndarray  # embedding-space centroids (C, d_s)
    occupied: np.ndarray           # (C,) bool
    d_ic: np.ndarray
    d_nc: np.ndarray


def cluster_distances(v_bar: np.ndarray, labels: np.ndarray, centroid_embeddings: np.ndarray, occupied) -> tuple:
    d = np.sqrt(((v_bar[:, None, :] - centroid_embeddings[None]) ** 2).sum(axis=-1))
    own = d[np.arange(len(v_bar)), labels]
    other = np.where(occupied[None, :] & (np.arange(d.shape[1])[None, :] != labels[:, None]), d, np.inf)
    return own, other.min(axis=1)


def epoch_cluster(ledger: ProfileLedger, n_clusters: int, seed: int = 0) -> ClusterResult:
    students = ledger.students
    if not students:
        raise ValueError("ledger holds no snapshots")
    if n_clusters > len(students):
        raise ValueError(f"n_clusters={n_clusters} exceeds the number of students ({len(students)})")
    v_bar = np.stack([normalized_mean(ledger.snapshots[s]) for s in students])
    b_bar = np.stack([normalized_mean(ledger.behaviors[s]) for s in students])
    km = kmeans(b_bar, n_clusters, seed=seed)
    occupied = np.array([(km.labels == j).any() for j in range(n_clusters)])
    cm = np.zeros((n_clusters, v_bar.shape[1]))
    for j in range(n_clusters):
        if occupied[j]:
            cm[j] = v_bar[km.labels == j].mean(axis=0)
    d_ic, d_nc = cluster_distances(v_bar, km.labels, cm, occupied)
    return ClusterResult(students, v_bar, b_bar, km.labels, km.centers, cm, occupied, d_ic, d_nc)


# ---------------------------------------------------------------------------
# outer-loop losses


def convergence_loss(snapshots_per_student: List[Tensor]) -> Tensor:
    """Mean over students of the summed pairwise L2 distance between that
    student's snapshots. Each entry is an (L, d) tensor."""
    total = None
    for snaps in snapshots_per_student:
        n = snaps.shape[0]
        if n < 2:
            term = Tensor(0.0)
        else:
            i, j = np.triu_indices(n, k=1)
            term = F.sum(F.l2_norm(F.sub(snaps[i], snaps[j]), axis=-1))
        total = term if total is None else total + term
    return F.mul(total, 1.0 / len(snapshots_per_student))


def silhouette_terms(d_ic, d_nc, tau: float) -> Tensor:
    frac = F.div(F.sub(d_nc, d_ic), F.maximum(d_ic, d_nc))
    return F.exp(F.mul(frac, -1.0 / tau))


def silhouette_loss(v_bar: Tensor, labels, centroid_embeddings, tau: float, occupied=None) -> Tensor:
    """Mean of ``exp(-((d_nc - d_ic) / max(d_ic, d_nc)) / tau)``.

    Distances are from each student's mean embedding to the (constant)
    embedding centroid of its own cluster and of the nearest other cluster.
    """
    labels = np.asarray(labels, dtype=np.int64)
    cm = np.asarray(getattr(centroid_embeddings, "data", centroid_embeddings), dtype=np.float64)
    n_c = cm.shape[0]
    occupied = np.ones(n_c, bool) if occupied is None else np.asarray(occupied, bool)
    if occupied.sum() < 2:
        raise ValueError("silhouette loss needs at least two occupied clusters")
    diff = F.sub(F.expand_dims(v_bar, 1), Tensor(cm[None]))        # (S, C, d)
    dist = F.l2_norm(diff, axis=-1)                                  # (S, C)
    rows = np.arange(len(labels))
    d_ic = dist[rows, labels]
    allowed = occupied[None, :] & (np.arange(n_c)[None, :] != labels[:, None])
    nearest_other = np.where(allowed, dist.data, np.inf).argmin(axis=1)
    d_nc = dist[rows, nearest_other]
    return F.mean(silhouette_terms(d_ic, d_nc, tau))
