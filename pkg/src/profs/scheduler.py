"""The outer training loop: alternating approximate projections.

Each projection k fixes a representative set R and an anchor copy of
the parameters, then runs M mini-batch steps on the chosen objective
plus a quadratic pull toward the anchor.  After M steps the anchor
moves to the current parameters and the next projection begins:

    for k = 1, 2, ...:
        draw R (one representative per class, cycling without repeats)
        for m = 1..M:
            draw R' from R, build a batch around it
            step theta on loss(theta; batch) + (lam/2)*||anchor - theta||^2
        anchor <- theta

M defaults to ceil(rho * I * L / B) so every representative is expected
to appear in about rho batches per projection.

`run_conventional` is the matching plain loop (fresh representatives
every step, no anchor term) used as a baseline; with M=1 and lam=0 the
projection loop reproduces it exactly, step for step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datakit import Dataset
from .losses import (
    MarginParams,
    ProjectionLossParams,
    aggregate_node,
    projection_hinge_node,
    regularizer_node,
)
from .numcore import (
    MlpSpec,
    ParamVector,
    embed_batch,
    forward_graph,
    gradient,
    init_params,
    param_sqnorm_diff,
)
from .optimizer import AdamState, adam_step, sgd_step
from .sampling import (
    MINING_MODES,
    BatchPlan,
    ClassIndex,
    MiningStats,
    RepCache,
    RepresentativeSet,
    build_batch,
    cache_update,
    derive_M,
    finalize_hard_negatives,
    sample_representatives,
)

OPTIMIZER_KINDS = ("adam", "sgd")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    head_lr_multiplier: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps_hat: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}, expected one of {OPTIMIZER_KINDS}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.head_lr_multiplier <= 0.0:
            raise ValueError(f"head_lr_multiplier must be positive, got {self.head_lr_multiplier}")


@dataclass(frozen=True)
class ScheduleConfig:
    """Knobs of the projection loop."""

    loss_kind: str = "margin"
    margin: MarginParams = field(default_factory=MarginParams)
    projection: ProjectionLossParams | None = None
    lam: float = 1e-3
    lambda_anneal: float | None = None
    m_steps: int | None = None
    rho: float = 6.0
    max_projections: int = 100
    rprime_size: int | None = None
    mining: str = "random"
    hncm_anchors: int | None = None
    allow_replacement: bool = False
    eval_every: int = 0
    convergence_tol: float = 0.0
    convergence_patience: int = 3

    def __post_init__(self):
        if self.loss_kind not in ("contrastive", "triplet", "margin", "projection"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_kind == "projection" and self.projection is None:
            raise ValueError("projection loss needs eps_plus/eps_minus thresholds")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.lambda_anneal is not None and not 0.0 < self.lambda_anneal <= 1.0:
            raise ValueError(f"lambda_anneal must be in (0, 1], got {self.lambda_anneal}")
        if self.m_steps is not None and self.m_steps < 1:
            raise ValueError(f"m_steps must be >= 1, got {self.m_steps}")
        if self.rho <= 0.0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.max_projections < 0:
            raise ValueError(f"max_projections must be >= 0, got {self.max_projections}")
        if self.rprime_size is not None and self.rprime_size < 1:
            raise ValueError(f"rprime_size must be >= 1, got {self.rprime_size}")
        if self.mining not in MINING_MODES:
            raise ValueError(f"unknown mining mode {self.mining!r}")
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be >= 0, got {self.eval_every}")
        if self.convergence_tol < 0.0:
            raise ValueError(f"convergence_tol must be >= 0, got {self.convergence_tol}")
        if self.convergence_patience < 1:
            raise ValueError(f"convergence_patience must be >= 1, got {self.convergence_patience}")


@dataclass
class ProjectionRecord:
    k: int
    steps: int
    loss: float
    displacement: float
    rel_displacement: float


@dataclass
class TrainState:
    """Everything the loop carries between projections."""

    theta: ParamVector
    theta_anchor: ParamVector
    adam: AdamState
    rng: np.random.Generator
    cache: RepCache
    used: dict[int, set[int]] = field(default_factory=dict)
    k: int = 0
    total_steps: int = 0
    draws_in_cycle: int = 0
    cycle_id: int = 0
    lam: float = 1e-3
    last_loss: float = math.nan
    history: list[ProjectionRecord] = field(default_factory=list)
    stats: MiningStats = field(default_factory=MiningStats)


def anchor_displacement(state: TrainState) -> float:
    """L2 distance between the current parameters and the anchor."""
    return math.sqrt(param_sqnorm_diff(state.theta, state.theta_anchor))


def eval_seed(seed: int, k: int) -> int:
    """Clustering seed for the evaluation at projection k."""
    return (seed * 1_000_003 + k) % (2**31)


def resolve_m(schedule: ScheduleConfig, plan: BatchPlan, n_classes: int) -> int:
    if schedule.m_steps is not None:
        return schedule.m_steps
    return derive_M(plan.batch_size, plan.positives_per_class, n_classes, schedule.rho)


def resolve_rprime(schedule: ScheduleConfig, plan: BatchPlan, n_classes: int) -> int:
    if schedule.rprime_size is not None:
        if schedule.rprime_size > n_classes:
            raise ValueError(
                f"rprime_size {schedule.rprime_size} exceeds {n_classes} classes"
            )
        return schedule.rprime_size
    return min(plan.batch_size // plan.positives_per_class, n_classes)


def init_state(
    dataset: Dataset,
    spec: MlpSpec,
    schedule: ScheduleConfig,
    opt: OptimizerConfig,
    seed: int,
) -> TrainState:
    rng = np.random.default_rng(seed)
    trainable_eps = schedule.loss_kind == "margin" and schedule.margin.epsilon_trainable
    theta = init_params(
        spec, rng, margin_epsilon=schedule.margin.epsilon if trainable_eps else None
    )
    adam = AdamState.create(
        theta,
        base_lr=opt.lr,
        head_lr_multiplier=opt.head_lr_multiplier,
        beta1=opt.beta1,
        beta2=opt.beta2,
        eps_hat=opt.eps_hat,
    )
    cache = RepCache.create(np.unique(dataset.labels), spec.embed_dim)
    return TrainState(
        theta=theta,
        theta_anchor=theta.copy(),
        adam=adam,
        rng=rng,
        cache=cache,
        lam=schedule.lam,
    )


def _maybe_reset_cycle(state: TrainState, index: ClassIndex) -> None:
    # one cycle = min-class-size draws; inside it the per-class picks
    # stay disjoint, then everything resets
    if state.draws_in_cycle >= index.min_class_size:
        for taken in state.used.values():
            taken.clear()
        state.draws_in_cycle = 0
        state.cycle_id += 1


def _warm_cache(state: TrainState, reps: RepresentativeSet, dataset: Dataset, spec: MlpSpec) -> None:
    # first sight of a class: seed its cache entry with a plain forward
    # pass so hard mining has something to measure against
    missing = [c for c in reps.reps if not state.cache.initialized[state.cache.row_of[int(c)]]]
    if not missing:
        return
    missing.sort()
    rows = np.array([reps.reps[c] for c in missing], dtype=np.int64)
    emb = embed_batch(dataset.x[rows], state.theta, spec)
    for c, e in zip(missing, emb):
        state.cache.set_entry(int(c), e)


def projection_step(
    state: TrainState,
    reps: RepresentativeSet,
    dataset: Dataset,
    index: ClassIndex,
    spec: MlpSpec,
    schedule: ScheduleConfig,
    plan: BatchPlan,
    opt: OptimizerConfig,
) -> float:
    """One inner step: build a batch around R' and update theta on the
    regularized objective.  Returns the objective value."""
    rprime = resolve_rprime(schedule, plan, index.n_classes)
    batch = build_batch(
        reps,
        rprime,
        index,
        plan,
        state.rng,
        mining=schedule.mining,
        cache=state.cache,
        hncm_anchors=schedule.hncm_anchors,
        allow_replacement=schedule.allow_replacement,
        stats=state.stats,
    )
    x_batch = dataset.x[batch.indices]
    if batch.negatives_pending:
        mined = embed_batch(x_batch, state.theta, spec)
        tuples = finalize_hard_negatives(batch, mined, plan.pairing)
    else:
        tuples = batch.tuples

    lam = state.lam
    anchor = state.theta_anchor
    aux: dict[str, np.ndarray] = {}

    def objective(pn):
        e = forward_graph(x_batch, pn, spec)
        aux["embeddings"] = e.value
        if schedule.loss_kind == "projection":
            pp = schedule.projection
            base = projection_hinge_node(
                e, batch.labels, batch.rep_positions, pp.eps_plus, pp.eps_minus
            )
        else:
            eps_node = None
            if schedule.loss_kind == "margin" and pn.margin_epsilon is not None:
                eps_node = pn.margin_epsilon
            base = aggregate_node(e, tuples, schedule.loss_kind, schedule.margin, eps_node)
        if lam != 0.0:
            base = base + regularizer_node(pn, anchor, lam)
        return base

    value, grad = gradient(objective, state.theta)
    if opt.kind == "adam":
        new_theta = adam_step(state.theta, grad, state.adam)
    else:
        new_theta = sgd_step(state.theta, grad, opt.lr)
    cache_update(state.cache, batch, aux["embeddings"], reps=reps)
    state.theta = new_theta
    state.total_steps += 1
    state.last_loss = value
    return value


def run_projection(
    state: TrainState,
    dataset: Dataset,
    index: ClassIndex,
    spec: MlpSpec,
    schedule: ScheduleConfig,
    plan: BatchPlan,
    opt: OptimizerConfig,
) -> ProjectionRecord:
    """One approximate projection: fix R, take M steps, move the anchor."""
    _maybe_reset_cycle(state, index)
    reps = sample_representatives(index, state.rng, state.used)
    reps.cycle_id = state.cycle_id
    state.draws_in_cycle += 1
    _warm_cache(state, reps, dataset, spec)
    m = resolve_m(schedule, plan, index.n_classes)
    loss = math.nan
    for _ in range(m):
        loss = projection_step(state, reps, dataset, index, spec, schedule, plan, opt)
    displacement = anchor_displacement(state)
    anchor_norm = math.sqrt(param_sqnorm_diff(state.theta_anchor, state.theta_anchor.zeros_like()))
    rel = displacement / max(anchor_norm, 1e-30)
    state.theta_anchor = state.theta.copy()
    state.k += 1
    if schedule.lambda_anneal is not None:
        state.lam = state.lam * schedule.lambda_anneal
    record = ProjectionRecord(
        k=state.k, steps=m, loss=loss, displacement=displacement, rel_displacement=rel
    )
    state.history.append(record)
    return record


def run_training(
    dataset: Dataset,
    spec: MlpSpec,
    schedule: ScheduleConfig,
    plan: BatchPlan,
    opt: OptimizerConfig,
    seed: int = 0,
    eval_hook=None,
    resume: TrainState | None = None,
) -> TrainState:
    """Drive projections until the budget or convergence.

    Convergence means `convergence_patience` consecutive projections
    whose relative anchor displacement stays below `convergence_tol`
    (a tolerance of 0 disables the check).  `eval_hook(state)` fires
    every `eval_every` projections and once at the end.
    """
    index = ClassIndex.from_labels(dataset.labels)
    _validate_plan(dataset, index, schedule, plan)
    state = resume if resume is not None else init_state(dataset, spec, schedule, opt, seed)
    streak = 0
    evaluated_at = -1
    while state.k < schedule.max_projections:
        record = run_projection(state, dataset, index, spec, schedule, plan, opt)
        if eval_hook is not None and schedule.eval_every > 0 and state.k % schedule.eval_every == 0:
            eval_hook(state)
            evaluated_at = state.k
        if schedule.convergence_tol > 0.0:
            streak = streak + 1 if record.rel_displacement < schedule.convergence_tol else 0
            if streak >= schedule.convergence_patience:
                break
    if eval_hook is not None and evaluated_at != state.k:
        eval_hook(state)
    return state


def run_conventional(
    dataset: Dataset,
    spec: MlpSpec,
    schedule: ScheduleConfig,
    plan: BatchPlan,
    opt: OptimizerConfig,
    seed: int = 0,
    eval_hook=None,
) -> TrainState:
    """Plain mini-batch loop: fresh representatives every step, no
    anchor term.  `max_projections` counts steps here."""
    index = ClassIndex.from_labels(dataset.labels)
    _validate_plan(dataset, index, schedule, plan)
    state = init_state(dataset, spec, schedule, opt, seed)
    state.lam = 0.0
    evaluated_at = -1
    while state.k < schedule.max_projections:
        _maybe_reset_cycle(state, index)
        reps = sample_representatives(index, state.rng, state.used)
        reps.cycle_id = state.cycle_id
        state.draws_in_cycle += 1
        _warm_cache(state, reps, dataset, spec)
        loss = projection_step(state, reps, dataset, index, spec, schedule, plan, opt)
        state.k += 1
        state.history.append(
            ProjectionRecord(k=state.k, steps=1, loss=loss, displacement=0.0, rel_displacement=0.0)
        )
        if eval_hook is not None and schedule.eval_every > 0 and state.k % schedule.eval_every == 0:
            eval_hook(state)
            evaluated_at = state.k
    if eval_hook is not None and evaluated_at != state.k:
        eval_hook(state)
    return state


def _validate_plan(
    dataset: Dataset, index: ClassIndex, schedule: ScheduleConfig, plan: BatchPlan
) -> None:
    if dataset.n_samples < plan.batch_size:
        raise ValueError(
            f"dataset has {dataset.n_samples} samples, batch needs {plan.batch_size}"
        )
    rprime = resolve_rprime(schedule, plan, index.n_classes)
    if rprime * plan.positives_per_class > plan.batch_size:
        raise ValueError(
            f"{rprime} classes at {plan.positives_per_class} each exceed batch "
            f"size {plan.batch_size}"
        )
    if not schedule.allow_replacement and index.min_class_size < plan.positives_per_class:
        raise ValueError(
            f"smallest class has {index.min_class_size} samples, "
            f"plan needs {plan.positives_per_class} per selected class"
        )
    if schedule.hncm_anchors is not None and not 1 <= schedule.hncm_anchors <= rprime:
        raise ValueError(f"hncm_anchors must be in [1, {rprime}]")


# ---- checkpoint text format ------------------------------------------

CHECKPOINT_MAGIC = "profs-checkpoint 1"
_FMT = "%.17g"


def _fmt_flat(arr: np.ndarray) -> str:
    return " ".join(_FMT % v for v in arr)


def _parse_flat(text: str) -> np.ndarray:
    if not text.strip():
        return np.zeros(0)
    return np.array([float(t) for t in text.split()], dtype=np.float64)


def save_checkpoint(
    path,
    state: TrainState,
    spec: MlpSpec,
    opt: OptimizerConfig,
    config_hash: str = "",
) -> None:
    """Write the full training state as sectioned text; everything a
    resumed run needs to continue bit for bit."""
    bg_state = state.rng.bit_generator.state
    if bg_state["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators are checkpointable")
    lines = [CHECKPOINT_MAGIC]
    hidden = ",".join(str(h) for h in spec.hidden_dims)
    lines.append(
        f"[spec] input_dim={spec.input_dim} hidden_dims={hidden} "
        f"embed_dim={spec.embed_dim} activation={spec.activation} "
        f"normalize_output={int(spec.normalize_output)} "
        f"has_margin={int(state.theta.margin_epsilon is not None)}"
    )
    lines.append(
        f"[counters] k={state.k} total_steps={state.total_steps} "
        f"adam_t={state.adam.t} cycle_id={state.cycle_id} "
        f"draws_in_cycle={state.draws_in_cycle} lam={_FMT % state.lam} "
        f"last_loss={_FMT % state.last_loss} config_hash={config_hash or '-'}"
    )
    lines.append(
        f"[optimizer] kind={opt.kind} lr={_FMT % opt.lr} "
        f"head_lr_multiplier={_FMT % opt.head_lr_multiplier} "
        f"beta1={_FMT % opt.beta1} beta2={_FMT % opt.beta2} eps_hat={_FMT % opt.eps_hat}"
    )
    lines.append(
        f"[rng] state={bg_state['state']['state']} inc={bg_state['state']['inc']} "
        f"has_uint32={bg_state['has_uint32']} uinteger={bg_state['uinteger']}"
    )
    lines.append("[theta] " + _fmt_flat(state.theta.to_flat()))
    lines.append("[theta_anchor] " + _fmt_flat(state.theta_anchor.to_flat()))
    lines.append("[adam_m] " + _fmt_flat(state.adam.m.to_flat()))
    lines.append("[adam_v] " + _fmt_flat(state.adam.v.to_flat()))
    cache = state.cache
    lines.append(f"[cache] classes={cache.classes.size} dim={cache.embeddings.shape[1]}")
    for i, c in enumerate(cache.classes):
        lines.append(
            f"{int(c)} {int(cache.initialized[i])} {int(cache.staleness[i])} "
            + _fmt_flat(cache.embeddings[i])
        )
    lines.append(f"[used] classes={len(state.used)}")
    for c in sorted(state.used):
        taken = " ".join(str(i) for i in sorted(state.used[c]))
        lines.append(f"{c}:{(' ' + taken) if taken else ''}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _kv(line: str, prefix: str) -> dict[str, str]:
    body = line[len(prefix) :].strip()
    out = {}
    for token in body.split():
        key, value = token.split("=", 1)
        out[key] = value
    return out


def load_checkpoint(path) -> tuple[TrainState, MlpSpec, OptimizerConfig, str]:
    """Rebuild a TrainState (empty history) from `save_checkpoint` output."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    sections: dict[str, str] = {}
    order: list[str] = []
    i = 1
    while i < len(lines):
        line = lines[i]
        if not line.startswith("["):
            raise ValueError(f"{path}: line {i + 1}: expected a section header")
        name = line[1 : line.index("]")]
        sections[name] = line
        order.append(name)
        if name == "cache":
            meta = _kv(line, f"[{name}]")
            n = int(meta["classes"])
            sections["cache_rows"] = lines[i + 1 : i + 1 + n]  # type: ignore[assignment]
            i += n
        elif name == "used":
            meta = _kv(line, f"[{name}]")
            n = int(meta["classes"])
            sections["used_rows"] = lines[i + 1 : i + 1 + n]  # type: ignore[assignment]
            i += n
        i += 1
    for required in ("spec", "counters", "optimizer", "rng", "theta", "theta_anchor", "adam_m", "adam_v", "cache", "used"):
        if required not in sections:
            raise ValueError(f"{path}: missing [{required}] section")

    meta = _kv(sections["spec"], "[spec]")
    hidden = tuple(int(h) for h in meta["hidden_dims"].split(",") if h)
    spec = MlpSpec(
        input_dim=int(meta["input_dim"]),
        hidden_dims=hidden,
        embed_dim=int(meta["embed_dim"]),
        activation=meta["activation"],
        normalize_output=bool(int(meta["normalize_output"])),
    )
    has_margin = bool(int(meta["has_margin"]))

    counters = _kv(sections["counters"], "[counters]")
    optmeta = _kv(sections["optimizer"], "[optimizer]")
    opt = OptimizerConfig(
        kind=optmeta["kind"],
        lr=float(optmeta["lr"]),
        head_lr_multiplier=float(optmeta["head_lr_multiplier"]),
        beta1=float(optmeta["beta1"]),
        beta2=float(optmeta["beta2"]),
        eps_hat=float(optmeta["eps_hat"]),
    )

    rng_meta = _kv(sections["rng"], "[rng]")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(rng_meta["state"]), "inc": int(rng_meta["inc"])},
        "has_uint32": int(rng_meta["has_uint32"]),
        "uinteger": int(rng_meta["uinteger"]),
    }
    rng = np.random.Generator(bg)

    template = init_params(spec, np.random.default_rng(0), margin_epsilon=1.0 if has_margin else None)
    theta = template.from_flat(_parse_flat(sections["theta"][len("[theta] ") :]))
    anchor = template.from_flat(_parse_flat(sections["theta_anchor"][len("[theta_anchor] ") :]))
    m = template.from_flat(_parse_flat(sections["adam_m"][len("[adam_m] ") :]))
    v = template.from_flat(_parse_flat(sections["adam_v"][len("[adam_v] ") :]))

    cache_meta = _kv(sections["cache"], "[cache]")
    n_rows = int(cache_meta["classes"])
    dim = int(cache_meta["dim"])
    rows = sections["cache_rows"]
    classes = np.zeros(n_rows, dtype=np.int64)
    emb = np.zeros((n_rows, dim))
    staleness = np.zeros(n_rows, dtype=np.int64)
    init_flags = np.zeros(n_rows, dtype=bool)
    for j, row in enumerate(rows):
        parts = row.split()
        if len(parts) != 3 + dim:
            raise ValueError(f"{path}: malformed cache row {j}")
        classes[j] = int(parts[0])
        init_flags[j] = bool(int(parts[1]))
        staleness[j] = int(parts[2])
        emb[j] = [float(p) for p in parts[3:]]
    cache = RepCache(
        classes=classes,
        embeddings=emb,
        staleness=staleness,
        initialized=init_flags,
        row_of={int(c): i for i, c in enumerate(classes)},
    )

    used: dict[int, set[int]] = {}
    for row in sections["used_rows"]:
        head, _, tail = row.partition(":")
        used[int(head)] = set(int(t) for t in tail.split())

    adam = AdamState(
        m=m,
        v=v,
        t=int(counters["adam_t"]),
        base_lr=opt.lr,
        head_lr_multiplier=opt.head_lr_multiplier,
        beta1=opt.beta1,
        beta2=opt.beta2,
        eps_hat=opt.eps_hat,
    )
    state = TrainState(
        theta=theta,
        theta_anchor=anchor,
        adam=adam,
        rng=rng,
        cache=cache,
        used=used,
        k=int(counters["k"]),
        total_steps=int(counters["total_steps"]),
        draws_in_cycle=int(counters["draws_in_cycle"]),
        cycle_id=int(counters["cycle_id"]),
        lam=float(counters["lam"]),
        last_loss=float(counters["last_loss"]),
    )
    config_hash = counters.get("config_hash", "-")
    return state, spec, opt, "" if config_hash == "-" else config_hash
