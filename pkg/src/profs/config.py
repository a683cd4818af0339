"""Experiment configuration: flat INI sections, strict validation.

Every key has a typed default; unknown sections or keys are rejected,
as is any value a downstream component would refuse, so a config that
loads cleanly will not blow up later for configuration reasons.
`render` produces the canonical effective text (used by --print-config
and hashed into checkpoints), and parsing that text reproduces the
config exactly.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass, field

from .datakit import WARP_MODES
from .losses import LOSS_KINDS, MarginParams, ProjectionLossParams
from .numcore import ACTIVATIONS, MlpSpec
from .sampling import MINING_MODES, PAIRINGS, BatchPlan
from .scheduler import OPTIMIZER_KINDS, OptimizerConfig, ScheduleConfig


class ConfigError(ValueError):
    """A configuration file problem: unknown key, bad type, bad value."""


@dataclass
class DatasetSection:
    path: str = ""
    classes: int = 40
    per_class: int = 25
    input_dim: int = 32
    cluster_spread: float = 0.5
    separation: float = 4.0
    warp: str = "rotate_tanh"
    split_fraction: float = 0.5
    seed: int = 0


@dataclass
class MlpSection:
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 512
    activation: str = "relu"
    normalize_output: bool = True


@dataclass
class LossSection:
    kind: str = "margin"
    epsilon: float = 1.0
    delta: float = 0.2
    epsilon_trainable: bool = True
    eps_plus: float = 0.8
    eps_minus: float = 1.2


@dataclass
class ScheduleSection:
    max_projections: int = 100
    M: int | None = None
    rho: float = 6.0
    lam: float = 1e-3
    lambda_anneal: float | None = None
    mining: str = "random"
    rprime_size: int | None = None
    hncm_anchors: int | None = None
    eval_every: int = 0
    convergence_tol: float = 0.0
    convergence_patience: int = 3
    loop: str = "projection"


@dataclass
class BatchSection:
    size: int = 128
    positives_per_class: int = 2
    pairing: str = "balanced_pairs"
    allow_replacement: bool = False


@dataclass
class OptimizerSection:
    kind: str = "adam"
    lr: float = 1e-3
    head_lr_multiplier: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps_hat: float = 1e-8


@dataclass
class RunSection:
    seed: int = 0
    eval_ks: tuple[int, ...] = (1, 2, 4, 8)


@dataclass
class SweepSection:
    param: str = ""
    values: tuple[str, ...] = ()


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    mlp: MlpSection = field(default_factory=MlpSection)
    loss: LossSection = field(default_factory=LossSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    batch: BatchSection = field(default_factory=BatchSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    run: RunSection = field(default_factory=RunSection)
    sweep: SweepSection = field(default_factory=SweepSection)


# file key -> (dataclass attribute, parser)
def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _str(v: str) -> str:
    return v


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_tuple(v: str) -> tuple[int, ...]:
    v = v.strip()
    if not v:
        return ()
    return tuple(int(t.strip()) for t in v.split(","))


def _str_tuple(v: str) -> tuple[str, ...]:
    v = v.strip()
    if not v:
        return ()
    return tuple(t.strip() for t in v.split(","))


_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "dataset": {
        "path": ("path", _str),
        "classes": ("classes", _int),
        "per_class": ("per_class", _int),
        "input_dim": ("input_dim", _int),
        "cluster_spread": ("cluster_spread", _float),
        "separation": ("separation", _float),
        "warp": ("warp", _str),
        "split_fraction": ("split_fraction", _float),
        "seed": ("seed", _int),
    },
    "mlp": {
        "hidden_dims": ("hidden_dims", _int_tuple),
        "embed_dim": ("embed_dim", _int),
        "activation": ("activation", _str),
        "normalize_output": ("normalize_output", _bool),
    },
    "loss": {
        "kind": ("kind", _str),
        "epsilon": ("epsilon", _float),
        "delta": ("delta", _float),
        "epsilon_trainable": ("epsilon_trainable", _bool),
        "eps_plus": ("eps_plus", _float),
        "eps_minus": ("eps_minus", _float),
    },
    "schedule": {
        "max_projections": ("max_projections", _int),
        "M": ("M", _int),
        "rho": ("rho", _float),
        "lambda": ("lam", _float),
        "lambda_anneal": ("lambda_anneal", _float),
        "mining": ("mining", _str),
        "rprime_size": ("rprime_size", _int),
        "hncm_anchors": ("hncm_anchors", _int),
        "eval_every": ("eval_every", _int),
        "convergence_tol": ("convergence_tol", _float),
        "convergence_patience": ("convergence_patience", _int),
        "loop": ("loop", _str),
    },
    "batch": {
        "size": ("size", _int),
        "positives_per_class": ("positives_per_class", _int),
        "pairing": ("pairing", _str),
        "allow_replacement": ("allow_replacement", _bool),
    },
    "optimizer": {
        "kind": ("kind", _str),
        "lr": ("lr", _float),
        "head_lr_multiplier": ("head_lr_multiplier", _float),
        "beta1": ("beta1", _float),
        "beta2": ("beta2", _float),
        "eps_hat": ("eps_hat", _float),
    },
    "run": {
        "seed": ("seed", _int),
        "eval_ks": ("eval_ks", _int_tuple),
    },
    "sweep": {
        "param": ("param", _str),
        "values": ("values", _str_tuple),
    },
}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse INI text against the schema, applying defaults."""
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # keys are case-sensitive ('M' vs 'mining')
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        schema = _SCHEMA[section]
        target = getattr(cfg, section)
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            attr, convert = schema[key]
            try:
                setattr(target, attr, convert(raw))
            except ValueError as exc:
                raise ConfigError(
                    f"{source}: bad value for {section}.{key}: {raw!r} ({exc})"
                ) from exc
    if parser.has_section("schedule"):
        keys = dict(parser.items("schedule"))
        if "M" in keys and "rho" in keys:
            raise ConfigError(f"{source}: M and rho are mutually exclusive in [schedule]")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    cfg = parse_config(text, source=str(path))
    validate_config(cfg)
    return cfg


# ---- building runtime objects (doubles as deep validation) ----------


def build_mlp_spec(cfg: ExperimentConfig, input_dim: int) -> MlpSpec:
    m = cfg.mlp
    return MlpSpec(
        input_dim=input_dim,
        hidden_dims=m.hidden_dims,
        embed_dim=m.embed_dim,
        activation=m.activation,
        normalize_output=m.normalize_output,
    )


def build_margin(cfg: ExperimentConfig) -> MarginParams:
    lo = cfg.loss
    return MarginParams(epsilon=lo.epsilon, delta=lo.delta, epsilon_trainable=lo.epsilon_trainable)


def build_projection_params(cfg: ExperimentConfig) -> ProjectionLossParams | None:
    if cfg.loss.kind != "projection":
        return None
    return ProjectionLossParams(
        eps_plus=cfg.loss.eps_plus,
        eps_minus=cfg.loss.eps_minus,
        lam=cfg.schedule.lam,
    )


def build_plan(cfg: ExperimentConfig) -> BatchPlan:
    b = cfg.batch
    return BatchPlan(
        batch_size=b.size,
        positives_per_class=b.positives_per_class,
        pairing=b.pairing,
    )


def build_schedule(cfg: ExperimentConfig) -> ScheduleConfig:
    s = cfg.schedule
    return ScheduleConfig(
        loss_kind=cfg.loss.kind,
        margin=build_margin(cfg),
        projection=build_projection_params(cfg),
        lam=s.lam,
        lambda_anneal=s.lambda_anneal,
        m_steps=s.M,
        rho=s.rho,
        max_projections=s.max_projections,
        rprime_size=s.rprime_size,
        mining=s.mining,
        hncm_anchors=s.hncm_anchors,
        allow_replacement=cfg.batch.allow_replacement,
        eval_every=s.eval_every,
        convergence_tol=s.convergence_tol,
        convergence_patience=s.convergence_patience,
    )


def build_optimizer(cfg: ExperimentConfig) -> OptimizerConfig:
    o = cfg.optimizer
    return OptimizerConfig(
        kind=o.kind,
        lr=o.lr,
        head_lr_multiplier=o.head_lr_multiplier,
        beta1=o.beta1,
        beta2=o.beta2,
        eps_hat=o.eps_hat,
    )


def validate_config(cfg: ExperimentConfig) -> None:
    """Reject any configuration a component would refuse later."""
    d = cfg.dataset
    try:
        if not d.path:
            if d.classes < 2:
                raise ValueError(f"need at least 2 classes, got {d.classes}")
            if d.per_class < 2:
                raise ValueError(f"need at least 2 samples per class, got {d.per_class}")
            if d.input_dim < 1:
                raise ValueError(f"input_dim must be positive, got {d.input_dim}")
            if d.cluster_spread < 0.0:
                raise ValueError(f"cluster_spread must be non-negative, got {d.cluster_spread}")
            if d.separation <= 0.0:
                raise ValueError(f"separation must be positive, got {d.separation}")
            if d.warp not in WARP_MODES:
                raise ValueError(f"unknown warp {d.warp!r}, expected one of {WARP_MODES}")
        if not 0.0 < d.split_fraction < 1.0:
            raise ValueError(f"split_fraction must be in (0, 1), got {d.split_fraction}")
        if cfg.mlp.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {cfg.mlp.activation!r}")
        if cfg.loss.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {cfg.loss.kind!r}")
        if cfg.schedule.mining not in MINING_MODES:
            raise ValueError(f"unknown mining mode {cfg.schedule.mining!r}")
        if cfg.schedule.loop not in ("projection", "conventional"):
            raise ValueError(f"unknown loop {cfg.schedule.loop!r}")
        if cfg.batch.pairing not in PAIRINGS:
            raise ValueError(f"unknown pairing {cfg.batch.pairing!r}")
        if cfg.optimizer.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {cfg.optimizer.kind!r}")
        if not cfg.run.eval_ks or any(k < 1 for k in cfg.run.eval_ks):
            raise ValueError(f"eval_ks must be positive integers, got {cfg.run.eval_ks}")
        if cfg.sweep.param and cfg.sweep.param not in ("lambda", "M"):
            raise ValueError(f"sweep param must be 'lambda' or 'M', got {cfg.sweep.param!r}")
        # constructing the runtime objects runs their validators
        build_mlp_spec(cfg, input_dim=max(d.input_dim, 1))
        build_plan(cfg)
        build_schedule(cfg)
        build_optimizer(cfg)
        if not d.path:
            # batch feasibility is checkable up front for synthetic data
            n_train_classes = math.ceil(d.split_fraction * d.classes)
            if n_train_classes >= d.classes:
                raise ValueError(
                    f"split_fraction {d.split_fraction} leaves no test classes"
                )
            train_samples = n_train_classes * d.per_class
            if train_samples < cfg.batch.size:
                raise ValueError(
                    f"train split has {train_samples} samples, batch needs {cfg.batch.size}"
                )
            if not cfg.batch.allow_replacement and d.per_class < cfg.batch.positives_per_class:
                raise ValueError(
                    f"per_class {d.per_class} below positives_per_class "
                    f"{cfg.batch.positives_per_class}"
                )
            if cfg.schedule.rprime_size is not None and cfg.schedule.rprime_size > n_train_classes:
                raise ValueError(
                    f"rprime_size {cfg.schedule.rprime_size} exceeds "
                    f"{n_train_classes} train classes"
                )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---- canonical rendering ---------------------------------------------


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)  # shortest text that round-trips
    if isinstance(v, tuple):
        return ",".join(str(t) for t in v)
    return str(v)


# knobs that bound or report on a run without changing its trajectory,
# so a resumed run may extend them under the same hash
_BUDGET_KEYS = {
    ("schedule", "max_projections"),
    ("schedule", "eval_every"),
    ("schedule", "convergence_tol"),
    ("schedule", "convergence_patience"),
}


def render_config(cfg: ExperimentConfig, include_budget: bool = True) -> str:
    """Canonical effective configuration; parsing it back is lossless."""
    out = io.StringIO()
    for section in ("dataset", "mlp", "loss", "schedule", "batch", "optimizer", "run", "sweep"):
        target = getattr(cfg, section)
        schema = _SCHEMA[section]
        lines = []
        for key, (attr, _) in schema.items():
            value = getattr(target, attr)
            if value is None:
                continue
            if not include_budget and (section, key) in _BUDGET_KEYS:
                continue
            if section == "dataset" and key == "path" and not value:
                continue
            if section == "schedule" and key == "rho" and cfg.schedule.M is not None:
                continue  # M and rho are mutually exclusive
            if section == "sweep" and not cfg.sweep.param:
                continue
            lines.append(f"{key} = {_fmt_value(value)}")
        if lines:
            out.write(f"[{section}]\n")
            out.write("\n".join(lines) + "\n\n")
    return out.getvalue().rstrip("\n") + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of the trajectory-defining keys (budget knobs excluded)."""
    text = render_config(cfg, include_budget=False)
    return hashlib.sha256(text.encode("ascii")).hexdigest()[:16]
