"""Command line entry point.

Subcommands:
  generate           write a synthetic dataset file
  train              run the projection (or conventional) training loop
  evaluate           score a checkpoint's embeddings on a dataset
  feasibility-check  test proximity constraints on embedded data
  gradcheck          compare analytic gradients against finite differences
  sweep              train once per value of lambda or M

Exit codes: 0 success, 1 configuration or validation problem, 2 runtime
failure.  Everything a run produces lands in --out as plain text.
"""
from __future__ import annotations

import argparse
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, datakit, feasibility
from .config import ConfigError, ExperimentConfig
from .evalmetrics import EvalReport, evaluate_embeddings, thread_cap
from .losses import (
    MarginParams,
    TupleSet,
    aggregate_node,
    projection_hinge_node,
    regularizer_node,
    rep_anchored_pairs,
)
from .numcore import MlpSpec, embed_batch, forward_graph, gradient, init_params, wrap_params
from .scheduler import (
    OptimizerConfig,
    TrainState,
    eval_seed,
    load_checkpoint,
    run_conventional,
    run_training,
    save_checkpoint,
)

GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_FD_STEP = 1e-6


class CliError(Exception):
    """Bad command line usage; maps to exit code 1."""


class _RuntimePhase(Exception):
    """Wrapper marking failures after validation finished."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="profs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset file")
    p.add_argument("--config", help="experiment config (INI)")
    p.add_argument("--seed", type=int, help="override the dataset seed")
    p.add_argument("--out", required=True, help="dataset file to write")

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", help="experiment config (INI)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="dataset file overriding the config's dataset")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument(
        "--print-config",
        action="store_true",
        help="print the effective config and exit",
    )

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file to score")
    p.add_argument("--seed", type=int, default=0, help="clustering seed")
    p.add_argument("--out", help="write the report to this file")

    p = sub.add_parser("feasibility-check", help="test proximity constraints")
    p.add_argument("--config", help="experiment config (INI)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the report to this file")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep", help="train once per sweep value")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", required=True, help="output directory")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        handler = {
            "generate": cmd_generate,
            "train": cmd_train,
            "evaluate": cmd_evaluate,
            "feasibility-check": cmd_feasibility,
            "gradcheck": cmd_gradcheck,
            "sweep": cmd_sweep,
        }[args.command]
        return handler(args)
    except (ConfigError, CliError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _RuntimePhase as exc:
        print(f"error: {exc.__cause__}", file=sys.stderr)
        return 2


def _run_phase(fn):
    """Execute past the validation boundary; failures become exit code 2."""
    try:
        return fn()
    except Exception as exc:
        raise _RuntimePhase() from exc


def _load_cfg(path: str | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        cfgmod.validate_config(cfg)
        return cfg
    return cfgmod.load_config(path)


def _build_dataset(cfg: ExperimentConfig, data_path: str | None) -> datakit.Dataset:
    if data_path:
        return datakit.load(data_path)
    d = cfg.dataset
    if d.path:
        return datakit.load(d.path)
    return datakit.gen_synthetic(
        n_classes=d.classes,
        per_class=d.per_class,
        input_dim=d.input_dim,
        cluster_spread=d.cluster_spread,
        separation=d.separation,
        warp=d.warp,
        seed=d.seed,
    )


# ---- generate --------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_cfg(args.config)
    if cfg.dataset.path:
        raise ConfigError("generate needs a synthetic dataset block, not a path")
    if args.seed is not None:
        cfg.dataset.seed = args.seed
    out = Path(args.out)

    def work():
        ds = _build_dataset(cfg, None)
        if out.parent != Path(""):
            out.parent.mkdir(parents=True, exist_ok=True)
        datakit.save(ds, out)
        print(
            f"wrote {ds.n_samples} samples, {ds.n_classes} classes, "
            f"dim {ds.input_dim} to {out}"
        )

    _run_phase(work)
    return 0


# ---- train -----------------------------------------------------------


def _metrics_header(ks: tuple[int, ...]) -> str:
    cols = " ".join(f"r@{k}" for k in ks)
    return f"# profs-metrics 1\n# columns: k step loss {cols} nmi f1 inertia\n"


def _metrics_row(k: int, step: int, loss: float, report: EvalReport, ks: tuple[int, ...]) -> str:
    parts = [str(k), str(step), "%.17g" % loss]
    parts.extend("%.17g" % report.recall_at[kk] for kk in ks)
    parts.append("%.17g" % report.nmi)
    parts.append("%.17g" % report.f1)
    parts.append("%.17g" % report.kmeans_inertia)
    return " ".join(parts) + "\n"


def _write_manifest(path: Path, command: str, seed: int, cfg_hash: str, wall: float) -> None:
    lines = [
        "profs-manifest 1",
        f"command={command}",
        f"seed={seed}",
        f"config_hash={cfg_hash}",
        f"python={platform.python_version()}",
        f"numpy={np.__version__}",
        f"package={__version__}",
        f"wall_seconds={wall:.3f}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def _run_train(
    cfg: ExperimentConfig,
    out: Path,
    data_path: str | None = None,
    checkpoint: str | None = None,
) -> TrainState:
    """Validated train flow shared by the train and sweep commands."""
    seed = cfg.run.seed
    ks = tuple(sorted(set(cfg.run.eval_ks)))
    cfg_hash = cfgmod.config_hash(cfg)

    full = _build_dataset(cfg, data_path)
    train_ds, test_ds = datakit.zero_shot_split(full, cfg.dataset.split_fraction)
    spec = cfgmod.build_mlp_spec(cfg, full.input_dim)
    schedule = cfgmod.build_schedule(cfg)
    plan = cfgmod.build_plan(cfg)
    opt = cfgmod.build_optimizer(cfg)
    if max(ks) > test_ds.n_samples - 1:
        raise ConfigError(
            f"eval k={max(ks)} needs at least {max(ks) + 1} test samples, "
            f"have {test_ds.n_samples}"
        )

    resume = None
    if checkpoint:
        if cfg.schedule.loop == "conventional":
            raise ConfigError("the conventional loop does not support --checkpoint")
        state, ck_spec, _, ck_hash = load_checkpoint(checkpoint)
        if ck_hash and ck_hash != cfg_hash:
            raise ConfigError(
                f"checkpoint was written under config {ck_hash}, current is {cfg_hash}"
            )
        if ck_spec != spec:
            raise ConfigError("checkpoint network spec does not match the config")
        resume = state

    def work() -> TrainState:
        start = time.monotonic()
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfgmod.render_config(cfg), encoding="ascii")
        n_threads = thread_cap()
        rows: list[str] = []

        def eval_hook(state: TrainState) -> None:
            emb = embed_batch(test_ds.x, state.theta, spec)
            report = evaluate_embeddings(
                emb,
                test_ds.labels,
                ks,
                kmeans_seed=eval_seed(seed, state.k),
                n_threads=n_threads,
            )
            rows.append(_metrics_row(state.k, state.total_steps, state.last_loss, report, ks))

        if cfg.schedule.loop == "conventional":
            state = run_conventional(
                train_ds, spec, schedule, plan, opt, seed=seed, eval_hook=eval_hook
            )
        else:
            state = run_training(
                train_ds, spec, schedule, plan, opt, seed=seed,
                eval_hook=eval_hook, resume=resume,
            )

        (out / "metrics.txt").write_text(_metrics_header(ks) + "".join(rows), encoding="ascii")
        proj_lines = ["# profs-projections 1", "# columns: k steps loss displacement rel_displacement"]
        for rec in state.history:
            proj_lines.append(
                f"{rec.k} {rec.steps} {'%.17g' % rec.loss} "
                f"{'%.17g' % rec.displacement} {'%.17g' % rec.rel_displacement}"
            )
        (out / "projections.txt").write_text("\n".join(proj_lines) + "\n", encoding="ascii")
        save_checkpoint(out / "checkpoint.txt", state, spec, opt, cfg_hash)
        _write_manifest(out / "manifest.txt", "train", seed, cfg_hash, time.monotonic() - start)
        if rows:
            last = rows[-1].split()
            print(f"k={state.k} steps={state.total_steps} r@{ks[0]}={last[3]}")
        return state

    return _run_phase(work)


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.print_config:
        print(cfgmod.render_config(cfg), end="")
        return 0
    if not args.out:
        raise CliError("train requires --out (or --print-config)")
    _run_train(cfg, Path(args.out), data_path=args.data, checkpoint=args.checkpoint)
    return 0


# ---- evaluate --------------------------------------------------------


def cmd_evaluate(args) -> int:
    state, spec, _, _ = load_checkpoint(args.checkpoint)
    ds = datakit.load(args.data)
    if ds.input_dim != spec.input_dim:
        raise ConfigError(
            f"dataset dimension {ds.input_dim} does not match network input {spec.input_dim}"
        )

    def work():
        emb = embed_batch(ds.x, state.theta, spec)
        report = evaluate_embeddings(
            emb,
            ds.labels,
            (1, 2, 4, 8),
            kmeans_seed=eval_seed(args.seed, state.k),
            n_threads=thread_cap(),
        )
        text = (
            f"profs-evaluation 1\nk={state.k}\nstep={state.total_steps}\n"
            + report.render()
            + "\n"
        )
        print(text, end="")
        if args.out:
            Path(args.out).write_text(text, encoding="ascii")

    _run_phase(work)
    return 0


# ---- feasibility-check ------------------------------------------------


def _constraint_thresholds(cfg: ExperimentConfig) -> tuple[float, float]:
    lo = cfg.loss
    if lo.kind == "projection":
        return lo.eps_plus, lo.eps_minus
    margin = cfgmod.build_margin(cfg)
    if lo.kind == "margin":
        return feasibility.proposition1_epsilons("margin", margin)
    return feasibility.proposition1_epsilons(lo.kind, margin, eps_plus=lo.eps_plus)


def cmd_feasibility(args) -> int:
    cfg = _load_cfg(args.config)
    state, spec, _, _ = load_checkpoint(args.checkpoint)
    ds = datakit.load(args.data)
    if ds.input_dim != spec.input_dim:
        raise ConfigError(
            f"dataset dimension {ds.input_dim} does not match network input {spec.input_dim}"
        )
    ep, em = _constraint_thresholds(cfg)

    def work():
        emb = embed_batch(ds.x, state.theta, spec)
        cons = feasibility.ConstraintSpec(ep, em)
        full = feasibility.check_full(emb, ds.labels, cons)
        reps = {
            int(c): int(np.nonzero(ds.labels == c)[0][0]) for c in ds.class_labels
        }
        relaxed = feasibility.check_relaxed(emb, ds.labels, reps, cons)
        text = (
            "profs-feasibility 1\n"
            f"eps_plus={ep:.17g}\neps_minus={em:.17g}\n"
            "[full]\n" + full.render() + "\n"
            "[relaxed]\n" + relaxed.render() + "\n"
        )
        print(text, end="")
        if args.out:
            Path(args.out).write_text(text, encoding="ascii")

    _run_phase(work)
    return 0


# ---- gradcheck --------------------------------------------------------


def _gradcheck_case(rng: np.random.Generator, kind: str):
    """Random network, batch and tuples for one gradient trial."""
    input_dim = int(rng.integers(3, 7))
    n_hidden = int(rng.integers(0, 3))
    hidden = tuple(int(rng.integers(4, 33)) for _ in range(n_hidden))
    embed_dim = int(rng.integers(3, 9))
    spec = MlpSpec(
        input_dim=input_dim,
        hidden_dims=hidden,
        embed_dim=embed_dim,
        activation="relu",
        normalize_output=True,
    )
    trainable = kind == "margin"
    theta = init_params(spec, rng, margin_epsilon=1.0 if trainable else None)
    if trainable:
        theta.margin_epsilon = np.asarray(1.0 + rng.uniform(-0.2, 0.2)).reshape(())
    anchor = theta.from_flat(theta.to_flat() + 0.1 * rng.standard_normal(theta.flat_len))
    lam = float(10.0 ** rng.uniform(-3, 0))
    # three classes, sizes 3/3/2
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2], dtype=np.int64)
    x = rng.normal(0.0, 1.5, size=(labels.size, input_dim))
    rep_positions = np.array([0, 3, 6], dtype=np.int64)
    pairs = []
    triplets = []
    for a in range(labels.size):
        same = np.nonzero((labels == labels[a]) & (np.arange(labels.size) > a))[0]
        other = np.nonzero(labels != labels[a])[0]
        for j in same:
            if kind == "triplet":
                triplets.append((a, int(j), int(rng.choice(other))))
            else:
                pairs.append((a, int(j), 1))
                pairs.append((a, int(rng.choice(other)), 0))
    tuples = TupleSet(
        pairs=np.asarray(pairs, dtype=np.int64) if pairs else np.zeros((0, 3), np.int64),
        triplets=np.asarray(triplets, dtype=np.int64) if triplets else np.zeros((0, 3), np.int64),
    )
    margin = MarginParams(epsilon=1.0, delta=0.2, epsilon_trainable=trainable)
    eps_pair = (0.6, 1.3)
    return spec, theta, anchor, lam, x, labels, rep_positions, tuples, margin, eps_pair


def _gradcheck_objective(case, kind: str):
    spec, _, anchor, lam, x, labels, rep_positions, tuples, margin, eps_pair = case

    def objective(pn):
        e = forward_graph(x, pn, spec)
        if kind == "projection":
            base = projection_hinge_node(e, labels, rep_positions, eps_pair[0], eps_pair[1])
        else:
            eps_node = pn.margin_epsilon if kind == "margin" else None
            base = aggregate_node(e, tuples, kind, margin, eps_node)
        return base + regularizer_node(pn, anchor, lam)

    return objective


def _kink_distance(case, kind: str) -> float:
    """Smallest margin between any hinge/relu argument and its kink."""
    spec, theta, _, _, x, labels, rep_positions, tuples, margin, eps_pair = case
    closest = math.inf
    h = x
    for i, (w, b) in enumerate(zip(theta.weights, theta.biases)):
        h = h @ w + b
        if i < theta.n_layers - 1:
            closest = min(closest, float(np.abs(h).min()))
            h = np.where(h > 0.0, h, 0.0)
    norms = np.sqrt((h * h).sum(axis=1, keepdims=True))
    closest = min(closest, float(norms.min()))
    if norms.min() == 0.0:
        return 0.0
    e = h / norms
    eps = float(theta.margin_epsilon) if theta.margin_epsilon is not None else margin.epsilon
    if kind == "triplet":
        a, p, n = tuples.triplets.T
        dp = np.linalg.norm(e[a] - e[p], axis=1)
        dn = np.linalg.norm(e[a] - e[n], axis=1)
        args = dp * dp - dn * dn + margin.epsilon
        dists = np.concatenate([dp, dn])
    elif kind == "projection":
        a, p, y = rep_anchored_pairs(labels, rep_positions)
        d = np.linalg.norm(e[a] - e[p], axis=1)
        args = np.where(y == 1, d - eps_pair[0], eps_pair[1] - d)
        dists = d
    else:
        i, j, y = tuples.pairs.T
        d = np.linalg.norm(e[i] - e[j], axis=1)
        if kind == "contrastive":
            args = np.where(y == 1, 1.0, margin.epsilon - d)  # positive branch is smooth
            dists = d[y == 0]
        else:
            args = np.where(y == 1, d - eps + margin.delta, eps + margin.delta - d)
            dists = d
    closest = min(closest, float(np.abs(args).min()))
    if dists.size:
        closest = min(closest, float(dists.min()))  # sqrt kink at d = 0
    return closest


def run_gradcheck(trials: int = 100, seed: int = 0) -> tuple[float, dict[str, float]]:
    """Compare analytic gradients with central differences over random
    configurations; returns (worst relative error, per-kind worst)."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    kinds = ("contrastive", "triplet", "margin", "projection")
    rng = np.random.default_rng(seed)
    worst = 0.0
    per_kind = {k: 0.0 for k in kinds}
    for t in range(trials):
        kind = kinds[t % len(kinds)]
        case = None
        for _ in range(50):
            candidate = _gradcheck_case(rng, kind)
            if _kink_distance(candidate, kind) > 1e-4:
                case = candidate
                break
        if case is None:
            raise RuntimeError("could not find a kink-free configuration")
        theta = case[1]
        objective = _gradcheck_objective(case, kind)
        _, grad = gradient(objective, theta)
        analytic = grad.to_flat()

        def value_at(flat: np.ndarray) -> float:
            pn = wrap_params(theta.from_flat(flat))
            return float(objective(pn).value)

        flat = theta.to_flat()
        fd = np.zeros_like(flat)
        h = GRADCHECK_FD_STEP
        for i in range(flat.size):
            up = flat.copy()
            up[i] += h
            down = flat.copy()
            down[i] -= h
            fd[i] = (value_at(up) - value_at(down)) / (2.0 * h)
        denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(fd)), 1e-12)
        err = float(np.linalg.norm(analytic - fd)) / denom
        worst = max(worst, err)
        per_kind[kind] = max(per_kind[kind], err)
    return worst, per_kind


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise CliError(f"--trials must be >= 1, got {args.trials}")
    worst, per_kind = _run_phase(lambda: run_gradcheck(args.trials, args.seed))
    for kind in sorted(per_kind):
        print(f"{kind}: max relative error {per_kind[kind]:.3e}")
    print(f"overall: max relative error {worst:.3e} over {args.trials} trials")
    if worst > GRADCHECK_TOLERANCE:
        print(f"FAIL: exceeds tolerance {GRADCHECK_TOLERANCE:.0e}", file=sys.stderr)
        return 1
    print(f"OK: within tolerance {GRADCHECK_TOLERANCE:.0e}")
    return 0


# ---- sweep -------------------------------------------------------------


def cmd_sweep(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    sw = cfg.sweep
    if not sw.param:
        raise ConfigError("sweep needs a [sweep] section with param and values")
    if not sw.values:
        raise ConfigError("sweep values must be non-empty")
    out = Path(args.out)

    lines = [
        "# profs-sweep 1",
        f"# param: {sw.param}",
        "# columns: value mean_displacement final_loss final_r1",
    ]
    for raw in sw.values:
        sub_cfg = cfgmod.load_config(args.config)
        sub_cfg.run.seed = cfg.run.seed
        if sw.param == "lambda":
            try:
                sub_cfg.schedule.lam = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad lambda value {raw!r}") from exc
        else:
            try:
                sub_cfg.schedule.M = int(raw)
            except ValueError as exc:
                raise ConfigError(f"bad M value {raw!r}") from exc
        cfgmod.validate_config(sub_cfg)
        state = _run_train(sub_cfg, out / f"{sw.param}_{raw}")
        disps = [rec.displacement for rec in state.history]
        mean_disp = sum(disps) / len(disps) if disps else math.nan
        final_loss = state.last_loss
        metrics = (out / f"{sw.param}_{raw}" / "metrics.txt").read_text(encoding="ascii")
        data_rows = [ln for ln in metrics.splitlines() if ln and not ln.startswith("#")]
        final_r1 = data_rows[-1].split()[3] if data_rows else "nan"
        lines.append(f"{raw} {'%.17g' % mean_disp} {'%.17g' % final_loss} {final_r1}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="ascii")
    print(f"swept {sw.param} over {len(sw.values)} values into {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
