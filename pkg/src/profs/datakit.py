"""Datasets: synthetic generation, zero-shot splits, text serialization.

Synthetic data places well-separated class means, draws Gaussian
samples around them, and optionally pushes everything through a fixed
random rotation followed by a scaled tanh so the classes are no longer
linearly arranged.

The file format is line-oriented text: a header declaring dimensions
and counts, then one sample per line as a label followed by float64
coordinates printed with 17 significant digits, which round-trips
exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WARP_MODES = ("none", "rotate_tanh")
FLOAT_FMT = "%.17g"
MEAN_SAMPLING_CAP = 100_000


@dataclass
class Dataset:
    """Labeled vectors; labels are non-negative ints."""

    x: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    seed: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] == 0:
            raise ValueError(f"x must be a non-empty 2-D array, got shape {self.x.shape}")
        if self.labels.shape != (self.x.shape[0],):
            raise ValueError("labels must be 1-D with one entry per sample")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("dataset contains non-finite values")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if not self.name or any(ch.isspace() for ch in self.name):
            raise ValueError(f"dataset name must be non-empty without whitespace, got {self.name!r}")

    @property
    def n_samples(self) -> int:
        return int(self.x.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.x.shape[1])

    @property
    def class_labels(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.class_labels.size)

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.labels, other.labels)
            and self.name == other.name
            and self.seed == other.seed
        )


def _sample_means(
    n_classes: int,
    dim: int,
    separation: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gaussian means rejected until pairwise distances reach `separation`."""
    means = np.zeros((n_classes, dim))
    accepted = 0
    tries = 0
    while accepted < n_classes:
        if tries >= MEAN_SAMPLING_CAP:
            raise ValueError(
                f"could not place {n_classes} class means at separation "
                f"{separation} in {dim} dimensions within {MEAN_SAMPLING_CAP} tries"
            )
        tries += 1
        candidate = rng.normal(0.0, separation, size=dim)
        if accepted == 0 or np.min(
            np.linalg.norm(means[:accepted] - candidate, axis=1)
        ) >= separation:
            means[accepted] = candidate
            accepted += 1
    return means


def gen_synthetic(
    n_classes: int,
    per_class: int,
    input_dim: int,
    cluster_spread: float = 0.5,
    separation: float = 4.0,
    warp: str = "rotate_tanh",
    seed: int = 0,
    name: str = "synthetic",
) -> Dataset:
    """Gaussian class clusters with guaranteed mean separation, labels
    1..n_classes, optionally warped by a fixed rotation plus tanh."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if per_class < 2:
        raise ValueError(f"need at least 2 samples per class, got {per_class}")
    if input_dim < 1:
        raise ValueError(f"input_dim must be positive, got {input_dim}")
    if cluster_spread < 0.0:
        raise ValueError(f"cluster_spread must be non-negative, got {cluster_spread}")
    if separation <= 0.0:
        raise ValueError(f"separation must be positive, got {separation}")
    if warp not in WARP_MODES:
        raise ValueError(f"unknown warp {warp!r}, expected one of {WARP_MODES}")
    rng = np.random.default_rng(seed)
    means = _sample_means(n_classes, input_dim, separation, rng)
    x = np.empty((n_classes * per_class, input_dim))
    labels = np.repeat(np.arange(1, n_classes + 1, dtype=np.int64), per_class)
    for c in range(n_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        x[block] = means[c] + rng.normal(0.0, cluster_spread, size=(per_class, input_dim))
    if warp == "rotate_tanh":
        gauss = rng.standard_normal((input_dim, input_dim))
        q, r = np.linalg.qr(gauss)
        q = q * np.sign(np.diag(r))
        x = np.tanh((x @ q.T) / separation) * separation
    return Dataset(x=x, labels=labels, name=name, seed=seed)


def zero_shot_split(dataset: Dataset, fraction: float = 0.5) -> tuple[Dataset, Dataset]:
    """Split by class: the first ceil(fraction * L) labels (sorted) go to
    train, the rest to test.  Labels are kept as they are, so the two
    sides are disjoint in both samples and classes."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    classes = dataset.class_labels
    n_train = math.ceil(fraction * classes.size)
    if n_train >= classes.size:
        raise ValueError(
            f"fraction {fraction} leaves no test classes for {classes.size} classes"
        )
    train_classes = set(int(c) for c in classes[:n_train])
    mask = np.isin(dataset.labels, sorted(train_classes))
    train = Dataset(
        x=dataset.x[mask],
        labels=dataset.labels[mask],
        name=f"{dataset.name}-train",
        seed=dataset.seed,
    )
    test = Dataset(
        x=dataset.x[~mask],
        labels=dataset.labels[~mask],
        name=f"{dataset.name}-test",
        seed=dataset.seed,
    )
    return train, test


def save(dataset: Dataset, path) -> None:
    """Write the line-oriented text form; `load` restores it exactly."""
    lines = [
        f"dim={dataset.input_dim} classes={dataset.n_classes} "
        f"count={dataset.n_samples} name={dataset.name}"
        + ("" if dataset.seed is None else f" seed={dataset.seed}")
    ]
    for label, row in zip(dataset.labels, dataset.x):
        coords = " ".join(FLOAT_FMT % v for v in row)
        lines.append(f"{label} {coords}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load(path) -> Dataset:
    """Parse a dataset file, failing fast with the offending line number."""
    with open(path, "r", encoding="ascii") as fh:
        raw = fh.read()
    lines = raw.splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = lines[0].split()
    fields: dict[str, str] = {}
    for token in header:
        if "=" not in token:
            raise ValueError(f"{path}: line 1: malformed header token {token!r}")
        key, value = token.split("=", 1)
        fields[key] = value
    for required in ("dim", "classes", "count"):
        if required not in fields:
            raise ValueError(f"{path}: line 1: header is missing {required}")
    try:
        dim = int(fields["dim"])
        n_classes = int(fields["classes"])
        count = int(fields["count"])
    except ValueError as exc:
        raise ValueError(f"{path}: line 1: non-integer header value") from exc
    name = fields.get("name", "dataset")
    seed = int(fields["seed"]) if "seed" in fields else None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ValueError(f"{path}: header declares {count} samples, found {len(body)}")
    x = np.empty((count, dim))
    labels = np.empty(count, dtype=np.int64)
    for i, line in enumerate(body):
        parts = line.split()
        lineno = i + 2
        if len(parts) != dim + 1:
            raise ValueError(
                f"{path}: line {lineno}: expected label plus {dim} values, got {len(parts)} fields"
            )
        try:
            labels[i] = int(parts[0])
            x[i] = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: unparseable value") from exc
        if not np.all(np.isfinite(x[i])):
            raise ValueError(f"{path}: line {lineno}: non-finite value")
    ds = Dataset(x=x, labels=labels, name=name, seed=seed)
    if ds.n_classes != n_classes:
        raise ValueError(
            f"{path}: header declares {n_classes} classes, found {ds.n_classes}"
        )
    return ds
