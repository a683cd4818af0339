"""Proximity constraint sets and their feasibility checks.

A labeled embedding configuration is feasible when every same-class
pair sits within eps_plus and every cross-class pair sits at least
eps_minus apart.  The relaxed variant only constrains pairs anchored
at one chosen representative per class, which is what a projection
step actually works on.

`verify_proposition1` checks the bridge between the two views: on any
feasible configuration the classic tuple losses are (near) zero, with
thresholds derived per loss kind by `proposition1_epsilons`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import MarginParams, rep_anchored_pairs
from .numcore import as_matrix64


@dataclass(frozen=True)
class ConstraintSpec:
    """Proximity thresholds: same-class within eps_plus, cross-class
    at least eps_minus apart."""

    eps_plus: float
    eps_minus: float

    def __post_init__(self):
        if self.eps_plus < 0.0:
            raise ValueError(f"eps_plus must be >= 0, got {self.eps_plus}")
        if not self.eps_plus < self.eps_minus:
            raise ValueError(
                f"need eps_plus < eps_minus, got {self.eps_plus} >= {self.eps_minus}"
            )


@dataclass
class FeasibilityReport:
    """Outcome of checking one constraint family on a configuration."""

    family: str
    satisfied: bool
    n_constraints: int
    n_violated: int
    max_violation: float
    worst_pair: tuple[int, int] | None

    def render(self) -> str:
        lines = [
            f"family={self.family}",
            f"satisfied={'yes' if self.satisfied else 'no'}",
            f"constraints={self.n_constraints}",
            f"violated={self.n_violated}",
            f"max_violation={self.max_violation:.17g}",
        ]
        if self.worst_pair is not None:
            lines.append(f"worst_pair={self.worst_pair[0]},{self.worst_pair[1]}")
        return "\n".join(lines)


def _check_pairs(
    e: np.ndarray,
    a: np.ndarray,
    p: np.ndarray,
    y: np.ndarray,
    spec: ConstraintSpec,
    family: str,
) -> FeasibilityReport:
    d = np.linalg.norm(e[a] - e[p], axis=1)
    # violation > 0 means the constraint is broken; boundaries count as satisfied
    violation = np.where(y == 1, d - spec.eps_plus, spec.eps_minus - d)
    violated = violation > 0.0
    n_violated = int(violated.sum())
    if a.shape[0] == 0:
        return FeasibilityReport(family, True, 0, 0, 0.0, None)
    worst = int(np.argmax(violation))
    max_violation = float(violation[worst])
    worst_pair = (int(a[worst]), int(p[worst])) if max_violation > 0.0 else None
    return FeasibilityReport(
        family=family,
        satisfied=n_violated == 0,
        n_constraints=int(a.shape[0]),
        n_violated=n_violated,
        max_violation=max(max_violation, 0.0),
        worst_pair=worst_pair,
    )


def check_full(embeddings, labels, spec: ConstraintSpec) -> FeasibilityReport:
    """Check every same-class and cross-class pair (i < j)."""
    e = as_matrix64(embeddings, "embeddings")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != e.shape[0]:
        raise ValueError("labels and embeddings disagree on sample count")
    n = e.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    y = (labels[iu] == labels[ju]).astype(np.int64)
    return _check_pairs(e, iu, ju, y, spec, "full")


def check_relaxed(
    embeddings,
    labels,
    representatives: dict[int, int],
    spec: ConstraintSpec,
) -> FeasibilityReport:
    """Check only pairs anchored at each class's representative."""
    e = as_matrix64(embeddings, "embeddings")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != e.shape[0]:
        raise ValueError("labels and embeddings disagree on sample count")
    classes = np.unique(labels)
    missing = [int(c) for c in classes if int(c) not in representatives]
    if missing:
        raise ValueError(f"no representative for classes {missing}")
    reps = np.array([representatives[int(c)] for c in classes], dtype=np.int64)
    if np.any(reps < 0) or np.any(reps >= labels.shape[0]):
        raise ValueError("representative index outside the dataset")
    if not np.all(labels[reps] == classes):
        raise ValueError("representative labels disagree with their classes")
    a, p, y = rep_anchored_pairs(labels, reps)
    return _check_pairs(e, a, p, y, spec, "relaxed")


def proposition1_epsilons(
    kind: str,
    params: MarginParams,
    eps_plus: float | None = None,
) -> tuple[float, float]:
    """Thresholds under which a feasible configuration drives the given
    loss kind to (near) zero.

    margin: (epsilon - delta, epsilon + delta), exactly zero inside.
    triplet: any eps_plus with eps_minus = sqrt(eps_plus^2 + epsilon).
    contrastive: any eps_plus with eps_minus = epsilon; the positive
    residual is bounded by eps_plus^2 and vanishes as eps_plus -> 0.
    """
    if kind == "margin":
        if params.delta >= params.epsilon:
            raise ValueError("margin thresholds need delta < epsilon")
        return params.epsilon - params.delta, params.epsilon + params.delta
    small = 0.0 if eps_plus is None else float(eps_plus)
    if small < 0.0:
        raise ValueError(f"eps_plus must be >= 0, got {small}")
    if kind == "triplet":
        return small, float(np.sqrt(small * small + params.epsilon))
    if kind == "contrastive":
        if small >= params.epsilon:
            raise ValueError("contrastive thresholds need eps_plus < epsilon")
        return small, params.epsilon
    raise ValueError(f"unknown loss kind {kind!r}")


def proposition1_bound(kind: str, eps_plus: float) -> float:
    """Largest per-tuple loss a feasible configuration can attain."""
    if kind == "contrastive":
        return eps_plus * eps_plus
    if kind in ("triplet", "margin"):
        return 0.0
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass
class Prop1Result:
    kind: str
    eps_plus: float
    eps_minus: float
    feasible: bool
    n_tuples: int
    max_term: float
    bound: float
    passed: bool


def _all_tuple_terms(e: np.ndarray, labels: np.ndarray, kind: str, params: MarginParams) -> np.ndarray:
    """Per-tuple loss values over every admissible tuple in the configuration."""
    n = e.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    d = np.linalg.norm(e[iu] - e[ju], axis=1)
    if kind == "contrastive":
        hinge = np.maximum(params.epsilon - d, 0.0)
        return np.where(same, d * d, hinge * hinge)
    if kind == "margin":
        pos = np.maximum(d - params.epsilon + params.delta, 0.0)
        neg = np.maximum(params.epsilon + params.delta - d, 0.0)
        return np.where(same, pos, neg)
    if kind == "triplet":
        terms = []
        dmat = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=2)
        for a in range(n):
            pos = np.nonzero((labels == labels[a]) & (np.arange(n) != a))[0]
            neg = np.nonzero(labels != labels[a])[0]
            if pos.size == 0 or neg.size == 0:
                continue
            dp = dmat[a, pos]
            dn = dmat[a, neg]
            t = np.maximum(dp[:, None] ** 2 - dn[None, :] ** 2 + params.epsilon, 0.0)
            terms.append(t.ravel())
        if not terms:
            return np.zeros(0)
        return np.concatenate(terms)
    raise ValueError(f"unknown loss kind {kind!r}")


def verify_proposition1(
    embeddings,
    labels,
    kind: str,
    params: MarginParams,
    eps_plus: float | None = None,
) -> Prop1Result:
    """Check that feasibility at the derived thresholds drives every
    tuple term below the per-kind bound."""
    e = as_matrix64(embeddings, "embeddings")
    labels = np.asarray(labels, dtype=np.int64)
    ep, em = proposition1_epsilons(kind, params, eps_plus)
    report = check_full(e, labels, ConstraintSpec(ep, em))
    terms = _all_tuple_terms(e, labels, kind, params)
    max_term = float(terms.max()) if terms.size else 0.0
    bound = proposition1_bound(kind, ep)
    passed = bool(report.satisfied and max_term <= bound + 1e-12)
    return Prop1Result(
        kind=kind,
        eps_plus=ep,
        eps_minus=em,
        feasible=report.satisfied,
        n_tuples=int(terms.size),
        max_term=max_term,
        bound=bound,
        passed=passed,
    )
