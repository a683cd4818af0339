"""Embedding network core: parameter containers, forward pass, gradients.

The embedder is a small fully connected network.  Inputs are row
vectors, layers compute `x @ W + b`, and the final embedding is
L2-normalized by default so that distances live on the unit sphere.

Parameters are held in a structured `ParamVector` (per-layer weights
and biases plus an optional trainable margin scalar) with lossless
round-trips to a flat float64 vector for checkpointing and finite
difference work.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Node

ACTIVATIONS = ("relu", "tanh")

# Below this output norm the normalized embedding direction is meaningless.
DEGENERATE_NORM = 1e-12


def as_vec64(x, name: str = "vector") -> np.ndarray:
    """Validate and return a finite 1-D float64 vector."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_matrix64(x, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 matrix."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of the embedding network."""

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    embed_dim: int = 512
    activation: str = "relu"
    normalize_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be positive, got {self.embed_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden dims must be positive, got {self.hidden_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each layer in forward order."""
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1


@dataclass
class ParamVector:
    """Network parameters: per-layer weights/biases plus an optional
    trainable margin scalar that belongs to the head parameter group."""

    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    margin_epsilon: np.ndarray | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must have matching layer counts")
        if len(self.weights) == 0:
            raise ValueError("ParamVector needs at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i} weight/bias shapes {w.shape}/{b.shape} disagree")
        if self.margin_epsilon is not None:
            self.margin_epsilon = np.asarray(self.margin_epsilon, dtype=np.float64).reshape(())

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def head_index(self) -> int:
        """Layer index of the head group (the output layer)."""
        return len(self.weights) - 1

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in flat-vector order."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        if self.margin_epsilon is not None:
            out.append(self.margin_epsilon)
        return out

    def head_flags(self) -> list[bool]:
        """Head-group membership aligned with `arrays()`."""
        flags = []
        for i in range(self.n_layers):
            is_head = i == self.head_index
            flags.extend([is_head, is_head])
        if self.margin_epsilon is not None:
            flags.append(True)
        return flags

    def copy(self) -> "ParamVector":
        return ParamVector(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            margin_epsilon=None if self.margin_epsilon is None else self.margin_epsilon.copy(),
        )

    def zeros_like(self) -> "ParamVector":
        return ParamVector(
            weights=[np.zeros_like(w) for w in self.weights],
            biases=[np.zeros_like(b) for b in self.biases],
            margin_epsilon=None
            if self.margin_epsilon is None
            else np.zeros_like(self.margin_epsilon),
        )

    @property
    def flat_len(self) -> int:
        return sum(a.size for a in self.arrays())

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, flat: np.ndarray) -> "ParamVector":
        """New ParamVector with this one's shapes and `flat`'s values."""
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != self.flat_len:
            raise ValueError(f"flat vector has {flat.size} entries, expected {self.flat_len}")
        out = self.zeros_like()
        pos = 0
        targets = out.arrays()
        for arr in targets:
            n = arr.size
            arr[...] = flat[pos : pos + n].reshape(arr.shape)
            pos += n
        return out


def matches_spec(theta: ParamVector, spec: MlpSpec) -> bool:
    dims = spec.layer_dims()
    if theta.n_layers != len(dims):
        return False
    for (w, b), (fi, fo) in zip(zip(theta.weights, theta.biases), dims):
        if w.shape != (fi, fo) or b.shape != (fo,):
            return False
    return True


def init_params(
    spec: MlpSpec,
    rng: np.random.Generator,
    margin_epsilon: float | None = None,
) -> ParamVector:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims():
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    eps = None if margin_epsilon is None else np.float64(margin_epsilon)
    return ParamVector(weights=weights, biases=biases, margin_epsilon=eps)


# GradVector carries one entry per parameter, same layout as ParamVector.
GradVector = ParamVector


@dataclass
class ParamNodes:
    """Graph-node mirror of a ParamVector, used to build objectives."""

    weights: list[Node]
    biases: list[Node]
    margin_epsilon: Node | None = None

    def arrays(self) -> list[Node]:
        out: list[Node] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        if self.margin_epsilon is not None:
            out.append(self.margin_epsilon)
        return out


def wrap_params(theta: ParamVector) -> ParamNodes:
    return ParamNodes(
        weights=[Node(w) for w in theta.weights],
        biases=[Node(b) for b in theta.biases],
        margin_epsilon=None if theta.margin_epsilon is None else Node(theta.margin_epsilon),
    )


def forward_graph(x: np.ndarray, params: ParamNodes, spec: MlpSpec) -> Node:
    """Differentiable forward pass for a (B, input_dim) batch."""
    x = as_matrix64(x, "batch")
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"batch has dimension {x.shape[1]}, spec expects {spec.input_dim}")
    h: Node = Node(x)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = h.relu() if spec.activation == "relu" else h.tanh()
    if spec.normalize_output:
        norms = (h * h).sum(axis=1, keepdims=True).sqrt()
        h = h / norms
    return h


def embed_batch(x: np.ndarray, theta: ParamVector, spec: MlpSpec) -> np.ndarray:
    """Embed a (B, input_dim) batch to (B, embed_dim)."""
    x = as_matrix64(x, "batch")
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"batch has dimension {x.shape[1]}, spec expects {spec.input_dim}")
    if not matches_spec(theta, spec):
        raise ValueError("parameter shapes do not match the network spec")
    h = x
    last = theta.n_layers - 1
    for i, (w, b) in enumerate(zip(theta.weights, theta.biases)):
        h = h @ w + b
        if i < last:
            if spec.activation == "relu":
                h = np.where(h > 0.0, h, 0.0)
            else:
                h = np.tanh(h)
    if spec.normalize_output:
        norms = np.sqrt((h * h).sum(axis=1, keepdims=True))
        if np.any(norms < DEGENERATE_NORM):
            bad = int(np.argmax(norms.ravel() < DEGENERATE_NORM))
            raise ValueError(f"degenerate embedding: row {bad} has norm below {DEGENERATE_NORM}")
        h = h / norms
    if not np.all(np.isfinite(h)):
        raise ValueError("embedding produced non-finite values")
    return h


def embed(x, theta: ParamVector, spec: MlpSpec) -> np.ndarray:
    """Embed a single input vector."""
    v = as_vec64(x, "input")
    return embed_batch(v[None, :], theta, spec)[0]


def gradient(
    objective: Callable[[ParamNodes], Node],
    theta: ParamVector,
) -> tuple[float, GradVector]:
    """Evaluate a scalar objective built from parameter nodes and return
    (value, gradient).  Missing gradients (parameters the objective never
    touched) come back as zeros.  Non-finite values anywhere abort."""
    params = wrap_params(theta)
    out = objective(params)
    if not isinstance(out, Node):
        raise TypeError("objective must return a graph Node")
    if out.value.size != 1:
        raise ValueError("objective must be scalar")
    value = float(out.value)
    if not math.isfinite(value):
        raise FloatingPointError("objective produced a non-finite value")
    out.backward()
    grad = theta.zeros_like()
    for target, node in zip(grad.arrays(), params.arrays()):
        if node.grad is not None:
            target[...] = node.grad
    flat = grad.to_flat()
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("gradient contains non-finite values")
    return value, grad


def param_axpy(a: float, u: ParamVector, v: ParamVector) -> ParamVector:
    """Elementwise a*u + v over matching parameter structures."""
    ua, va = u.arrays(), v.arrays()
    if len(ua) != len(va) or any(x.shape != y.shape for x, y in zip(ua, va)):
        raise ValueError("parameter structures do not match")
    out = u.zeros_like()
    for dst, x, y in zip(out.arrays(), ua, va):
        dst[...] = a * x + y
    return out


def param_sqnorm_diff(u: ParamVector, v: ParamVector) -> float:
    """Squared L2 distance between two parameter vectors."""
    ua, va = u.arrays(), v.arrays()
    if len(ua) != len(va) or any(x.shape != y.shape for x, y in zip(ua, va)):
        raise ValueError("parameter structures do not match")
    total = 0.0
    for x, y in zip(ua, va):
        d = x - y
        total += float((d * d).sum())
    return total


def pairwise_distance(e1, e2) -> float:
    """Euclidean distance between two embedding vectors."""
    a = as_vec64(e1, "embedding")
    b = as_vec64(e2, "embedding")
    if a.shape != b.shape:
        raise ValueError(f"embedding dimensions differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def distance_matrix(embeddings) -> np.ndarray:
    """All-pairs Euclidean distances, row for row identical to
    `pairwise_distance` on the same inputs."""
    e = as_matrix64(embeddings, "embeddings")
    n = e.shape[0]
    out = np.empty((n, n))
    for i in range(n):
        out[i] = np.linalg.norm(e - e[i], axis=1)
    return out
