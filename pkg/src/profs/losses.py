"""Loss terms over embedding tuples and the projection-step objective.

Three classic tuple terms (contrastive, triplet, margin) plus the
hinge objective minimized during one approximate projection: per-pair
proximity hinges anchored at batch representatives, with a quadratic
pull toward the previous parameter vector.

Every term exists in two forms that must agree: a plain numpy value
path (used for reporting, checking and finite differences) and a graph
path built from autodiff nodes (used for training).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node
from .numcore import ParamNodes, ParamVector, as_matrix64, param_sqnorm_diff

LOSS_KINDS = ("contrastive", "triplet", "margin", "projection")
PAIR_KINDS = ("contrastive", "margin")


@dataclass(frozen=True)
class MarginParams:
    """Parameters shared by the tuple terms: boundary epsilon and, for
    the margin term, the half-width delta around it."""

    epsilon: float = 1.0
    delta: float = 0.2
    epsilon_trainable: bool = True

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.delta < 0.0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")


@dataclass(frozen=True)
class ProjectionLossParams:
    """Relaxed proximity thresholds and the anchor pull strength."""

    eps_plus: float
    eps_minus: float
    lam: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.eps_plus:
            raise ValueError(f"eps_plus must be >= 0, got {self.eps_plus}")
        if not self.eps_plus < self.eps_minus:
            raise ValueError(
                f"need eps_plus < eps_minus, got {self.eps_plus} >= {self.eps_minus}"
            )
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


def _as_tuple_array(rows, width: int, name: str) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, width), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"{name} must be (n, {width}), got shape {arr.shape}")
    return arr


@dataclass
class TupleSet:
    """Index tuples over a batch: pairs are (anchor, partner, y) with
    y=1 for same class, triplets are (anchor, positive, negative)."""

    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    triplets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.pairs = _as_tuple_array(self.pairs, 3, "pairs")
        self.triplets = _as_tuple_array(self.triplets, 3, "triplets")
        if self.pairs.shape[0] and not np.isin(self.pairs[:, 2], (0, 1)).all():
            raise ValueError("pair labels must be 0 or 1")

    def count(self, kind: str) -> int:
        return self.triplets.shape[0] if kind == "triplet" else self.pairs.shape[0]

    def check_indices(self, n: int) -> None:
        for name, arr, cols in (("pairs", self.pairs, 2), ("triplets", self.triplets, 3)):
            if arr.shape[0]:
                idx = arr[:, :cols]
                if idx.min() < 0 or idx.max() >= n:
                    raise ValueError(f"{name} reference indices outside [0, {n})")


# ---- scalar terms ---------------------------------------------------


def contrastive_term(d: float, y: int, epsilon: float) -> float:
    """y*d^2 + (1-y)*[epsilon - d]+^2"""
    if d < 0.0:
        raise ValueError(f"distance must be >= 0, got {d}")
    if y:
        return d * d
    hinge = max(epsilon - d, 0.0)
    return hinge * hinge


def triplet_term(d_pos: float, d_neg: float, epsilon: float) -> float:
    """[d_pos^2 - d_neg^2 + epsilon]+"""
    if d_pos < 0.0 or d_neg < 0.0:
        raise ValueError("distances must be >= 0")
    return max(d_pos * d_pos - d_neg * d_neg + epsilon, 0.0)


def margin_term(d: float, y: int, params: MarginParams) -> float:
    """y*[d - epsilon + delta]+ + (1-y)*[epsilon + delta - d]+"""
    if d < 0.0:
        raise ValueError(f"distance must be >= 0, got {d}")
    if y:
        return max(d - params.epsilon + params.delta, 0.0)
    return max(params.epsilon + params.delta - d, 0.0)


# ---- batch aggregation ----------------------------------------------


def aggregate(embeddings, tuples: TupleSet, kind: str, params: MarginParams) -> float:
    """Mean term value over the tuple set.

    Each term is computed through the scalar term functions and reduced
    with a plain sequential sum, so the result is bit for bit what a
    naive loop over `contrastive_term` and friends produces.
    """
    if kind not in ("contrastive", "triplet", "margin"):
        raise ValueError(f"unknown aggregate kind {kind!r}")
    e = as_matrix64(embeddings, "embeddings")
    tuples.check_indices(e.shape[0])
    count = tuples.count(kind)
    if count == 0:
        raise ValueError(f"no tuples for kind {kind!r}")
    total = 0.0
    if kind == "triplet":
        for a, p, n in tuples.triplets:
            dp = float(np.linalg.norm(e[a] - e[p]))
            dn = float(np.linalg.norm(e[a] - e[n]))
            total += triplet_term(dp, dn, params.epsilon)
    else:
        for i, j, y in tuples.pairs:
            d = float(np.linalg.norm(e[i] - e[j]))
            if kind == "contrastive":
                total += contrastive_term(d, int(y), params.epsilon)
            else:
                total += margin_term(d, int(y), params)
    return total / count


def generic_regularized(
    theta: ParamVector,
    theta_anchor: ParamVector,
    base_loss: float,
    lam: float,
) -> float:
    """base_loss + (lam/2) * ||theta_anchor - theta||^2"""
    if lam < 0.0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return base_loss + 0.5 * lam * param_sqnorm_diff(theta_anchor, theta)


# ---- representative-anchored pairs and the projection objective -----


def rep_anchored_pairs(
    labels: np.ndarray, rep_positions: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Enumerate the proximity pairs a projection step penalizes.

    Each representative is paired with every non-representative in the
    batch; representative-representative pairs appear once, anchored at
    the lower class label.  Returns (anchors, partners, y).
    """
    labels = np.asarray(labels, dtype=np.int64)
    reps = np.asarray(rep_positions, dtype=np.int64)
    if reps.size == 0:
        raise ValueError("batch contains no representatives")
    if reps.min() < 0 or reps.max() >= labels.shape[0]:
        raise ValueError("representative positions outside the batch")
    if np.unique(reps).size != reps.size:
        raise ValueError("duplicate representative positions")
    rep_labels = labels[reps]
    if np.unique(rep_labels).size != rep_labels.size:
        raise ValueError("two representatives share a class")
    is_rep = np.zeros(labels.shape[0], dtype=bool)
    is_rep[reps] = True
    anchors, partners = [], []
    for r in np.sort(reps):
        mask = ~is_rep
        mask |= is_rep & (labels > labels[r])
        js = np.nonzero(mask)[0]
        anchors.append(np.full(js.shape, r, dtype=np.int64))
        partners.append(js)
    a = np.concatenate(anchors)
    p = np.concatenate(partners)
    y = (labels[a] == labels[p]).astype(np.int64)
    return a, p, y


def projection_hinge_sum(
    embeddings,
    labels,
    rep_positions,
    eps_plus: float,
    eps_minus: float,
) -> float:
    """Sum of proximity hinges over the representative-anchored pairs.

    Per-pair distances and hinges are evaluated one at a time and summed
    sequentially, matching a naive loop bit for bit.
    """
    e = as_matrix64(embeddings, "embeddings")
    a, p, y = rep_anchored_pairs(np.asarray(labels), np.asarray(rep_positions))
    total = 0.0
    for i, j, same in zip(a, p, y):
        d = float(np.linalg.norm(e[i] - e[j]))
        if same:
            total += max(d - eps_plus, 0.0)
        else:
            total += max(eps_minus - d, 0.0)
    return total


def projection_objective(
    theta: ParamVector,
    theta_anchor: ParamVector,
    embeddings,
    labels,
    rep_positions,
    params: ProjectionLossParams,
) -> float:
    """Hinge sum plus the quadratic pull toward the anchor parameters."""
    base = projection_hinge_sum(embeddings, labels, rep_positions, params.eps_plus, params.eps_minus)
    return generic_regularized(theta, theta_anchor, base, params.lam)


# ---- graph builders --------------------------------------------------


def _pair_distance_nodes(e: Node, i: np.ndarray, j: np.ndarray) -> tuple[Node, Node]:
    """(squared distances, distances) between gathered embedding rows."""
    diff = e.take(i) - e.take(j)
    sq = (diff * diff).sum(axis=1)
    return sq, sq.sqrt()


def aggregate_node(
    e: Node,
    tuples: TupleSet,
    kind: str,
    params: MarginParams,
    eps_node: Node | None = None,
) -> Node:
    """Graph form of `aggregate`; `eps_node` substitutes a trainable
    boundary for the margin term."""
    if kind not in ("contrastive", "triplet", "margin"):
        raise ValueError(f"unknown aggregate kind {kind!r}")
    count = tuples.count(kind)
    if count == 0:
        raise ValueError(f"no tuples for kind {kind!r}")
    if kind == "triplet":
        a, p, n = tuples.triplets.T
        sqp, _ = _pair_distance_nodes(e, a, p)
        sqn, _ = _pair_distance_nodes(e, a, n)
        terms = (sqp - sqn + params.epsilon).relu()
    else:
        i, j, y = tuples.pairs.T
        ypos = (y == 1).astype(np.float64)
        yneg = 1.0 - ypos
        sq, d = _pair_distance_nodes(e, i, j)
        if kind == "contrastive":
            hinge = (params.epsilon - d).relu()
            terms = sq * ypos + hinge * hinge * yneg
        else:
            eps = eps_node if eps_node is not None else params.epsilon
            pos = ((d - eps) + params.delta).relu()
            neg = ((eps - d) + params.delta).relu()
            terms = pos * ypos + neg * yneg
    return terms.sum() * (1.0 / count)


def projection_hinge_node(
    e: Node,
    labels,
    rep_positions,
    eps_plus: float,
    eps_minus: float,
) -> Node:
    """Graph form of `projection_hinge_sum`."""
    a, p, y = rep_anchored_pairs(np.asarray(labels), np.asarray(rep_positions))
    ypos = (y == 1).astype(np.float64)
    yneg = 1.0 - ypos
    _, d = _pair_distance_nodes(e, a, p)
    pos = (d - eps_plus).relu()
    neg = (eps_minus - d).relu()
    return (pos * ypos + neg * yneg).sum()


def regularizer_node(params: ParamNodes, theta_anchor: ParamVector, lam: float) -> Node:
    """(lam/2) * ||theta_anchor - theta||^2 as a graph node."""
    if lam < 0.0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    nodes, refs = params.arrays(), theta_anchor.arrays()
    if len(nodes) != len(refs):
        raise ValueError("parameter structures do not match")
    total: Node | None = None
    for node, ref in zip(nodes, refs):
        diff = node - ref
        term = (diff * diff).sum()
        total = term if total is None else total + term
    assert total is not None
    return total * (0.5 * lam)
