"""Representative sampling, batch construction and hard class mining.

Training revolves around one representative per class.  A projection
works against a fixed representative set R; each inner step draws a
subset of classes R', packs their representatives plus fresh positives
into a batch, pads with uniform extras, and pairs every representative
with its in-batch positives and one negative apiece.

Hard negative class mining keeps a cache of the most recent embedding
of each class representative.  Selecting hard classes costs one
distance evaluation per (candidate class, anchor), so the per-batch
cost is linear in the number of classes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import TupleSet

MINING_MODES = ("random", "hard_pairs", "hncm")
PAIRINGS = ("balanced_pairs", "triplets")


@dataclass
class ClassIndex:
    """Sample indices grouped by class label."""

    labels: np.ndarray
    classes: np.ndarray
    by_class: dict[int, np.ndarray]

    @classmethod
    def from_labels(cls, labels) -> "ClassIndex":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1 or labels.size == 0:
            raise ValueError("labels must be a non-empty 1-D integer array")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        classes = np.unique(labels)
        if classes.size < 2:
            raise ValueError("need at least two classes")
        by_class = {int(c): np.nonzero(labels == c)[0] for c in classes}
        return cls(labels=labels, classes=classes, by_class=by_class)

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.classes.shape[0])

    @property
    def min_class_size(self) -> int:
        return min(v.size for v in self.by_class.values())

    def size_of(self, label: int) -> int:
        return int(self.by_class[int(label)].size)


@dataclass
class RepresentativeSet:
    """One chosen sample index per class."""

    reps: dict[int, int]
    cycle_id: int = 0

    @property
    def classes(self) -> np.ndarray:
        return np.array(sorted(self.reps), dtype=np.int64)

    def index_of(self, label: int) -> int:
        return self.reps[int(label)]


def sample_representatives(
    index: ClassIndex,
    rng: np.random.Generator,
    used: dict[int, set[int]],
) -> RepresentativeSet:
    """Draw one unused sample per class, in sorted class order.

    `used` tracks indices already chosen in the current cycle and is
    updated in place; a class that has exhausted its samples gets its
    used set reset before drawing.
    """
    reps: dict[int, int] = {}
    for c in index.classes:
        c = int(c)
        pool = index.by_class[c]
        taken = used.setdefault(c, set())
        if len(taken) >= pool.size:
            taken.clear()
        candidates = pool[~np.isin(pool, sorted(taken))] if taken else pool
        choice = int(rng.choice(candidates))
        taken.add(choice)
        reps[c] = choice
    return RepresentativeSet(reps=reps)


def derive_M(batch_size: int, positives_per_class: int, n_classes: int, rho: float = 6.0) -> int:
    """Inner steps per projection so each class's representative is
    expected to appear in about rho batches: ceil(rho * I * L / B)."""
    if batch_size < 1 or positives_per_class < 1 or n_classes < 1:
        raise ValueError("batch_size, positives_per_class and n_classes must be positive")
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    return math.ceil(rho * positives_per_class * n_classes / batch_size)


@dataclass(frozen=True)
class BatchPlan:
    """Shape of one training batch."""

    batch_size: int = 128
    positives_per_class: int = 2
    pairing: str = "balanced_pairs"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.positives_per_class < 2:
            raise ValueError(
                f"positives_per_class must be >= 2, got {self.positives_per_class}"
            )
        if self.batch_size % self.positives_per_class != 0:
            raise ValueError(
                f"batch_size {self.batch_size} is not divisible by "
                f"positives_per_class {self.positives_per_class}"
            )
        if self.pairing not in PAIRINGS:
            raise ValueError(f"unknown pairing {self.pairing!r}, expected one of {PAIRINGS}")


@dataclass
class TupleBatch:
    """A constructed batch: dataset indices, labels, which positions are
    representatives, and the loss tuples over batch positions."""

    indices: np.ndarray
    labels: np.ndarray
    rep_positions: np.ndarray
    rep_classes: np.ndarray
    tuples: TupleSet
    negatives_pending: bool = False

    @property
    def size(self) -> int:
        return int(self.indices.shape[0])


@dataclass
class MiningStats:
    """Cost counters for mining instrumentation."""

    distance_evals: int = 0
    batches: int = 0


@dataclass
class RepCache:
    """Most recent embedding of each class representative.

    Entries are refreshed whenever a representative passes through a
    batch, so between refreshes they drift stale; `staleness` counts
    update rounds since each entry was last touched.
    """

    classes: np.ndarray
    embeddings: np.ndarray
    staleness: np.ndarray
    initialized: np.ndarray
    row_of: dict[int, int] = field(default_factory=dict)

    @classmethod
    def create(cls, classes, embed_dim: int) -> "RepCache":
        classes = np.unique(np.asarray(classes, dtype=np.int64))
        if embed_dim < 1:
            raise ValueError(f"embed_dim must be positive, got {embed_dim}")
        n = classes.shape[0]
        return cls(
            classes=classes,
            embeddings=np.zeros((n, embed_dim)),
            staleness=np.zeros(n, dtype=np.int64),
            initialized=np.zeros(n, dtype=bool),
            row_of={int(c): i for i, c in enumerate(classes)},
        )

    @property
    def n_initialized(self) -> int:
        return int(self.initialized.sum())

    def set_entry(self, label: int, embedding: np.ndarray) -> None:
        row = self.row_of[int(label)]
        self.embeddings[row] = embedding
        self.staleness[row] = 0
        self.initialized[row] = True


def cache_update(
    cache: RepCache,
    batch: TupleBatch,
    embeddings: np.ndarray,
    reps: RepresentativeSet | None = None,
) -> None:
    """Refresh cache entries for every representative present in the
    batch and age the rest by one round.

    `embeddings` must be the batch embedded under the parameters the
    batch was just used with.  When `reps` is given, extras that happen
    to be the current representative of an unselected class refresh
    that class too.
    """
    if embeddings.shape[0] != batch.size:
        raise ValueError("embeddings and batch disagree on size")
    updated_rows = []
    for pos, label in zip(batch.rep_positions, batch.rep_classes):
        row = cache.row_of[int(label)]
        cache.embeddings[row] = embeddings[int(pos)]
        cache.initialized[row] = True
        updated_rows.append(row)
    if reps is not None:
        rep_pos_set = set(int(p) for p in batch.rep_positions)
        index_to_pos = {int(ix): p for p, ix in enumerate(batch.indices) if p not in rep_pos_set}
        for label, sample_index in reps.reps.items():
            row = cache.row_of.get(int(label))
            if row is None or row in updated_rows:
                continue
            pos = index_to_pos.get(int(sample_index))
            if pos is not None and int(batch.labels[pos]) == int(label):
                cache.embeddings[row] = embeddings[pos]
                cache.initialized[row] = True
                updated_rows.append(row)
    mask = np.ones(cache.classes.shape[0], dtype=bool)
    mask[updated_rows] = False
    cache.staleness[mask] += 1
    cache.staleness[~mask] = 0


def hncm_select(
    cache: RepCache,
    anchor_classes: np.ndarray,
    count: int,
    among: np.ndarray | None = None,
    stats: MiningStats | None = None,
) -> np.ndarray:
    """Pick the `count` classes whose cached representatives sit nearest
    to the anchor set (min distance over anchors, ties to the lower
    label).  Costs one distance evaluation per candidate-anchor pair."""
    anchors = np.unique(np.asarray(anchor_classes, dtype=np.int64))
    if anchors.size == 0:
        raise ValueError("need at least one anchor class")
    rows = []
    for c in anchors:
        row = cache.row_of.get(int(c))
        if row is None or not cache.initialized[row]:
            raise ValueError(f"anchor class {int(c)} has no cached representative")
        rows.append(row)
    anchor_emb = cache.embeddings[rows]
    if among is None:
        pool = cache.classes
    else:
        pool = np.unique(np.asarray(among, dtype=np.int64))
    candidate_labels = []
    candidate_rows = []
    for c in pool:
        row = cache.row_of.get(int(c))
        if row is None or int(c) in anchors:
            continue
        if not cache.initialized[row]:
            continue
        candidate_labels.append(int(c))
        candidate_rows.append(row)
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if len(candidate_labels) < count:
        raise ValueError(
            f"only {len(candidate_labels)} cached candidate classes, need {count}"
        )
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    cand_emb = cache.embeddings[candidate_rows]
    diffs = cand_emb[:, None, :] - anchor_emb[None, :, :]
    dists = np.sqrt((diffs * diffs).sum(axis=2))
    if stats is not None:
        stats.distance_evals += len(candidate_labels) * anchors.size
    dmin = dists.min(axis=1)
    order = np.lexsort((np.asarray(candidate_labels), dmin))
    chosen = np.asarray(candidate_labels, dtype=np.int64)[order[:count]]
    return chosen


def _draw_without(pool: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if size > pool.size:
        raise ValueError(f"cannot draw {size} from a pool of {pool.size}")
    return rng.choice(pool, size=size, replace=False)


def build_batch(
    reps: RepresentativeSet,
    rprime_size: int,
    index: ClassIndex,
    plan: BatchPlan,
    rng: np.random.Generator,
    mining: str = "random",
    cache: RepCache | None = None,
    hncm_anchors: int | None = None,
    allow_replacement: bool = False,
    stats: MiningStats | None = None,
) -> TupleBatch:
    """Construct one batch around a subset of the representative set.

    Layout is one group of `positives_per_class` samples per selected
    class, its representative first, followed by uniform extras that top
    the batch up to `plan.batch_size`.  With random mining the tuples
    are complete; with hard mining the negatives are left pending until
    the batch has been embedded.
    """
    if mining not in MINING_MODES:
        raise ValueError(f"unknown mining mode {mining!r}, expected one of {MINING_MODES}")
    all_classes = reps.classes
    if rprime_size < 1 or rprime_size > all_classes.size:
        raise ValueError(
            f"rprime_size must be in [1, {all_classes.size}], got {rprime_size}"
        )
    ipc = plan.positives_per_class
    if rprime_size * ipc > plan.batch_size:
        raise ValueError(
            f"{rprime_size} classes at {ipc} samples each exceed batch size {plan.batch_size}"
        )
    if index.n_samples < plan.batch_size:
        raise ValueError(
            f"dataset has {index.n_samples} samples, batch needs {plan.batch_size}"
        )

    # pick R' from R
    if mining == "hncm":
        if cache is None:
            raise ValueError("hncm mining requires a representative cache")
        n_anchor = hncm_anchors if hncm_anchors is not None else max(1, rprime_size // 2)
        if not 1 <= n_anchor <= rprime_size:
            raise ValueError(f"hncm anchor count must be in [1, {rprime_size}]")
        anchors = _draw_without(all_classes, n_anchor, rng)
        hard = hncm_select(cache, anchors, rprime_size - n_anchor, among=all_classes, stats=stats)
        selected = np.concatenate([anchors, hard])
    else:
        selected = _draw_without(all_classes, rprime_size, rng)

    # one group per class: representative first, then fresh positives
    chosen: list[int] = []
    labels: list[int] = []
    rep_positions: list[int] = []
    for c in selected:
        c = int(c)
        rep_idx = reps.index_of(c)
        pool = index.by_class[c]
        others = pool[pool != rep_idx]
        need = ipc - 1
        if others.size >= need:
            picks = _draw_without(others, need, rng)
        elif allow_replacement:
            source = others if others.size else pool
            picks = rng.choice(source, size=need, replace=True)
        else:
            raise ValueError(
                f"class {c} has {pool.size} samples, needs {ipc} per batch"
            )
        rep_positions.append(len(chosen))
        chosen.append(rep_idx)
        labels.append(c)
        for ix in picks:
            chosen.append(int(ix))
            labels.append(c)

    # uniform extras to fill the batch
    n_extra = plan.batch_size - len(chosen)
    if n_extra > 0:
        taken = np.zeros(index.n_samples, dtype=bool)
        taken[chosen] = True
        remaining = np.nonzero(~taken)[0]
        if remaining.size < n_extra:
            raise ValueError("dataset too small to fill the batch without repeats")
        extras = _draw_without(remaining, n_extra, rng)
        for ix in extras:
            chosen.append(int(ix))
            labels.append(int(index.labels[ix]))

    indices = np.asarray(chosen, dtype=np.int64)
    labels_arr = np.asarray(labels, dtype=np.int64)
    rep_positions_arr = np.asarray(rep_positions, dtype=np.int64)
    rep_classes = labels_arr[rep_positions_arr]

    # tuples: every representative with each in-batch same-class sample
    pos_pairs: list[tuple[int, int]] = []
    for r, c in zip(rep_positions_arr, rep_classes):
        partners = np.nonzero((labels_arr == c) & (np.arange(indices.size) != r))[0]
        for j in partners:
            pos_pairs.append((int(r), int(j)))

    pending = mining in ("hard_pairs", "hncm")
    if pending:
        pairs = [(r, j, 1) for r, j in pos_pairs]
        tuples = TupleSet(pairs=np.asarray(pairs, dtype=np.int64))
    else:
        rows_p: list[tuple[int, int, int]] = []
        rows_t: list[tuple[int, int, int]] = []
        for r, j in pos_pairs:
            neg_candidates = np.nonzero(labels_arr != labels_arr[r])[0]
            if neg_candidates.size == 0:
                raise ValueError("batch has a single class, cannot draw negatives")
            n = int(rng.choice(neg_candidates))
            if plan.pairing == "triplets":
                rows_t.append((r, j, n))
            else:
                rows_p.append((r, j, 1))
                rows_p.append((r, n, 0))
        tuples = TupleSet(
            pairs=np.asarray(rows_p, dtype=np.int64) if rows_p else np.zeros((0, 3), np.int64),
            triplets=np.asarray(rows_t, dtype=np.int64) if rows_t else np.zeros((0, 3), np.int64),
        )

    if stats is not None:
        stats.batches += 1
    return TupleBatch(
        indices=indices,
        labels=labels_arr,
        rep_positions=rep_positions_arr,
        rep_classes=rep_classes,
        tuples=tuples,
        negatives_pending=pending,
    )


def nearest_other_class(
    embeddings: np.ndarray,
    labels: np.ndarray,
    anchor: int,
) -> int:
    """Position of the closest sample with a different label; ties go to
    the lower position."""
    labels = np.asarray(labels)
    candidates = np.nonzero(labels != labels[anchor])[0]
    if candidates.size == 0:
        raise ValueError("no samples from another class")
    d = np.linalg.norm(embeddings[candidates] - embeddings[anchor], axis=1)
    return int(candidates[int(np.argmin(d))])


def finalize_hard_negatives(
    batch: TupleBatch,
    embeddings: np.ndarray,
    pairing: str = "balanced_pairs",
) -> TupleSet:
    """Resolve pending negatives: each positive pair gets the batch
    sample nearest its anchor among other classes."""
    if not batch.negatives_pending:
        return batch.tuples
    if embeddings.shape[0] != batch.size:
        raise ValueError("embeddings and batch disagree on size")
    rows_p: list[tuple[int, int, int]] = []
    rows_t: list[tuple[int, int, int]] = []
    nearest: dict[int, int] = {}
    for r, j, _ in batch.tuples.pairs:
        r = int(r)
        if r not in nearest:
            nearest[r] = nearest_other_class(embeddings, batch.labels, r)
        n = nearest[r]
        if pairing == "triplets":
            rows_t.append((r, int(j), n))
        else:
            rows_p.append((r, int(j), 1))
            rows_p.append((r, n, 0))
    return TupleSet(
        pairs=np.asarray(rows_p, dtype=np.int64) if rows_p else np.zeros((0, 3), np.int64),
        triplets=np.asarray(rows_t, dtype=np.int64) if rows_t else np.zeros((0, 3), np.int64),
    )


def hard_pair_mine(embeddings: np.ndarray, labels, plan: BatchPlan) -> TupleSet:
    """Mine tuples from an embedded batch: every same-class pair (i < j)
    anchored at i, with i's nearest other-class sample as the negative."""
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.shape[0] != labels.shape[0]:
        raise ValueError("labels and embeddings disagree on sample count")
    n = labels.shape[0]
    rows_p: list[tuple[int, int, int]] = []
    rows_t: list[tuple[int, int, int]] = []
    nearest: dict[int, int] = {}
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] != labels[j]:
                continue
            if i not in nearest:
                nearest[i] = nearest_other_class(embeddings, labels, i)
            neg = nearest[i]
            if plan.pairing == "triplets":
                rows_t.append((i, j, neg))
            else:
                rows_p.append((i, j, 1))
                rows_p.append((i, neg, 0))
    return TupleSet(
        pairs=np.asarray(rows_p, dtype=np.int64) if rows_p else np.zeros((0, 3), np.int64),
        triplets=np.asarray(rows_t, dtype=np.int64) if rows_t else np.zeros((0, 3), np.int64),
    )
