"""Retrieval and clustering evaluation for embedding spaces.

Recall@K asks whether any of a query's K nearest neighbors (self
excluded) shares its label.  Clustering quality comes from running
k-means with k set to the number of classes and scoring the assignment
against the labels with NMI and pair-counting F1.

All ties break toward the lower index so results are reproducible.
Query evaluation is embarrassingly parallel; `n_threads` (usually from
the PROFS_THREADS environment variable) caps the worker count without
changing any result.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .numcore import as_matrix64

KMEANS_MAX_ITER = 300


def thread_cap() -> int:
    """Evaluation worker cap from PROFS_THREADS (default 1)."""
    raw = os.environ.get("PROFS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"PROFS_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"PROFS_THREADS must be >= 1, got {n}")
    return n


@dataclass
class EvalReport:
    """One evaluation of an embedded dataset."""

    recall_at: dict[int, float]
    nmi: float
    f1: float
    kmeans_inertia: float
    n_queries: int

    def render(self) -> str:
        lines = [f"queries={self.n_queries}"]
        for k in sorted(self.recall_at):
            lines.append(f"recall@{k}={self.recall_at[k]:.17g}")
        lines.append(f"nmi={self.nmi:.17g}")
        lines.append(f"f1={self.f1:.17g}")
        lines.append(f"kmeans_inertia={self.kmeans_inertia:.17g}")
        return "\n".join(lines)


def _query_hits(e: np.ndarray, labels: np.ndarray, i: int, ks: list[int]) -> list[bool]:
    d = np.linalg.norm(e - e[i], axis=1)
    d[i] = np.inf
    order = np.argsort(d, kind="stable")
    max_k = ks[-1]
    neighbor_labels = labels[order[:max_k]]
    hits = []
    for k in ks:
        hits.append(bool(np.any(neighbor_labels[:k] == labels[i])))
    return hits


def recall_at_k(embeddings, labels, ks=(1, 2, 4, 8), n_threads: int | None = None) -> dict[int, float]:
    """Fraction of queries with a same-label sample among the K nearest."""
    e = as_matrix64(embeddings, "embeddings")
    labels = np.asarray(labels, dtype=np.int64)
    n = e.shape[0]
    if labels.shape[0] != n:
        raise ValueError("labels and embeddings disagree on sample count")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive integers")
    if ks[-1] > n - 1:
        raise ValueError(f"k={ks[-1]} needs at least {ks[-1] + 1} samples, have {n}")
    if n_threads is None:
        n_threads = thread_cap()
    hits = np.zeros((n, len(ks)), dtype=bool)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            for i, row in enumerate(pool.map(lambda q: _query_hits(e, labels, q, ks), range(n))):
                hits[i] = row
    else:
        for i in range(n):
            hits[i] = _query_hits(e, labels, i, ks)
    return {k: float(hits[:, c].sum() / n) for c, k in enumerate(ks)}


def brute_force_retrieval_oracle(embeddings, labels, ks=(1, 2, 4, 8)) -> dict[int, float]:
    """Plain-loop recall@K used to cross-check the vectorized path."""
    e = as_matrix64(embeddings, "embeddings")
    labels = np.asarray(labels, dtype=np.int64)
    n = e.shape[0]
    ks = sorted(set(int(k) for k in ks))
    counts = {k: 0 for k in ks}
    for i in range(n):
        scored = []
        for j in range(n):
            if j == i:
                continue
            scored.append((float(np.linalg.norm(e[i] - e[j])), j))
        scored.sort()
        for k in ks:
            if any(labels[j] == labels[i] for _, j in scored[:k]):
                counts[k] += 1
    return {k: counts[k] / n for k in ks}


@dataclass
class KmeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)


def _sq_dists_to(e: np.ndarray, point: np.ndarray) -> np.ndarray:
    diff = e - point
    return (diff * diff).sum(axis=1)


def kmeans(embeddings, k: int, seed: int) -> KmeansResult:
    """Lloyd's algorithm with distance-weighted seeding.

    Runs until the assignment stops changing or 300 iterations.  Empty
    clusters keep their previous centroid.  The recorded inertia after
    each assignment step never increases.
    """
    e = as_matrix64(embeddings, "embeddings")
    n = e.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)

    # seeding: first centroid uniform, the rest weighted by squared
    # distance to the nearest centroid so far
    chosen = [int(rng.integers(n))]
    sq = _sq_dists_to(e, e[chosen[0]])
    for _ in range(1, k):
        total = float(sq.sum())
        if total > 0.0:
            nxt = int(rng.choice(n, p=sq / total))
        else:
            # all remaining mass sits on existing centroids; take the
            # lowest index not already chosen
            taken = set(chosen)
            nxt = next(i for i in range(n) if i not in taken)
        chosen.append(nxt)
        sq = np.minimum(sq, _sq_dists_to(e, e[nxt]))
    centroids = e[chosen].copy()

    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    n_iter = 0
    for _ in range(KMEANS_MAX_ITER):
        n_iter += 1
        d2 = np.empty((n, k))
        for c in range(k):
            d2[:, c] = _sq_dists_to(e, centroids[c])
        new_assign = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), new_assign].sum())
        history.append(inertia)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for c in range(k):
            members = e[assignments == c]
            if members.shape[0] > 0:
                centroids[c] = members.mean(axis=0)
    return KmeansResult(
        assignments=assignments,
        centroids=centroids,
        inertia=history[-1],
        n_iter=n_iter,
        inertia_history=history,
    )


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    h = 0.0
    for c in counts:
        if c > 0:
            p = c / total
            h -= p * math.log(p)
    return h


def nmi(assignments, labels) -> float:
    """Mutual information normalized by the arithmetic mean of the two
    entropies; defined as 1.0 when both partitions are single blocks."""
    a = np.asarray(assignments, dtype=np.int64)
    b = np.asarray(labels, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("assignments and labels must be matching non-empty 1-D arrays")
    n = a.size
    a_vals, a_idx = np.unique(a, return_inverse=True)
    b_vals, b_idx = np.unique(b, return_inverse=True)
    table = np.zeros((a_vals.size, b_vals.size))
    np.add.at(table, (a_idx, b_idx), 1.0)
    ha = _entropy(table.sum(axis=1))
    hb = _entropy(table.sum(axis=0))
    if ha + hb == 0.0:
        return 1.0
    mi = 0.0
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    for i in range(a_vals.size):
        for j in range(b_vals.size):
            pij = table[i, j] / n
            if pij > 0.0:
                mi += pij * math.log(pij / (pa[i] * pb[j]))
    value = 2.0 * mi / (ha + hb)
    return float(min(max(value, 0.0), 1.0))


def pairwise_f1(assignments, labels) -> float:
    """F1 over same-cluster/same-class sample pairs."""
    a = np.asarray(assignments, dtype=np.int64)
    b = np.asarray(labels, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("assignments and labels must be matching non-empty 1-D arrays")
    a_vals, a_idx = np.unique(a, return_inverse=True)
    b_vals, b_idx = np.unique(b, return_inverse=True)
    table = np.zeros((a_vals.size, b_vals.size), dtype=np.int64)
    np.add.at(table, (a_idx, b_idx), 1)

    def pairs(x: np.ndarray) -> float:
        return float((x * (x - 1) // 2).sum())

    together_and_same = pairs(table)
    together = pairs(table.sum(axis=1))
    same = pairs(table.sum(axis=0))
    if together == 0.0 or same == 0.0:
        return 0.0
    precision = together_and_same / together
    recall = together_and_same / same
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate_embeddings(
    embeddings,
    labels,
    ks=(1, 2, 4, 8),
    kmeans_seed: int = 0,
    n_threads: int | None = None,
) -> EvalReport:
    """Full protocol: recall@K plus k-means clustering scored by NMI and
    pairwise F1, with k equal to the number of classes."""
    e = as_matrix64(embeddings, "embeddings")
    labels = np.asarray(labels, dtype=np.int64)
    recalls = recall_at_k(e, labels, ks, n_threads=n_threads)
    n_classes = np.unique(labels).size
    km = kmeans(e, n_classes, kmeans_seed)
    return EvalReport(
        recall_at=recalls,
        nmi=nmi(km.assignments, labels),
        f1=pairwise_f1(km.assignments, labels),
        kmeans_inertia=km.inertia,
        n_queries=int(e.shape[0]),
    )
