"""Projection-loop semantics: inner steps, anchor moves, checkpoints, resume."""

import math

import numpy as np
import pytest

from profs.datakit import Dataset, gen_synthetic
from profs.feasibility import ConstraintSpec, check_full
from profs.losses import MarginParams, ProjectionLossParams
from profs.numcore import MlpSpec, ParamVector, embed_batch
from profs.optimizer import AdamState
from profs.sampling import BatchPlan, ClassIndex, sample_representatives
from profs.scheduler import (
    CHECKPOINT_MAGIC,
    OptimizerConfig,
    ScheduleConfig,
    anchor_displacement,
    eval_seed,
    init_state,
    load_checkpoint,
    projection_step,
    resolve_m,
    resolve_rprime,
    run_conventional,
    run_projection,
    run_training,
    save_checkpoint,
)

SPEC = MlpSpec(input_dim=5, hidden_dims=(8,), embed_dim=4)
PLAN = BatchPlan(batch_size=8, positives_per_class=2)
OPT = OptimizerConfig()


def small_dataset(seed=0, n_classes=4, per_class=6, dim=5):
    return gen_synthetic(
        n_classes, per_class, dim, cluster_spread=0.5, separation=4.0, seed=seed
    )


class TestConfigValidation:
    def test_optimizer_config(self):
        with pytest.raises(ValueError, match="unknown optimizer"):
            OptimizerConfig(kind="momentum")
        with pytest.raises(ValueError, match="lr"):
            OptimizerConfig(lr=0.0)
        with pytest.raises(ValueError, match="head_lr_multiplier"):
            OptimizerConfig(head_lr_multiplier=0.0)

    def test_schedule_config(self):
        with pytest.raises(ValueError, match="loss kind"):
            ScheduleConfig(loss_kind="hinge3")
        with pytest.raises(ValueError, match="eps_plus/eps_minus"):
            ScheduleConfig(loss_kind="projection")
        with pytest.raises(ValueError, match="lambda"):
            ScheduleConfig(lam=-1.0)
        with pytest.raises(ValueError, match="lambda_anneal"):
            ScheduleConfig(lambda_anneal=0.0)
        with pytest.raises(ValueError, match="lambda_anneal"):
            ScheduleConfig(lambda_anneal=1.5)
        with pytest.raises(ValueError, match="m_steps"):
            ScheduleConfig(m_steps=0)
        with pytest.raises(ValueError, match="rho"):
            ScheduleConfig(rho=0.0)
        with pytest.raises(ValueError, match="max_projections"):
            ScheduleConfig(max_projections=-1)
        with pytest.raises(ValueError, match="rprime_size"):
            ScheduleConfig(rprime_size=0)
        with pytest.raises(ValueError, match="mining"):
            ScheduleConfig(mining="soft")
        with pytest.raises(ValueError, match="eval_every"):
            ScheduleConfig(eval_every=-1)
        with pytest.raises(ValueError, match="convergence_tol"):
            ScheduleConfig(convergence_tol=-0.1)
        with pytest.raises(ValueError, match="convergence_patience"):
            ScheduleConfig(convergence_patience=0)

    def test_plan_validation_through_run(self):
        ds = small_dataset(per_class=2)
        with pytest.raises(ValueError, match="dataset has 8 samples"):
            run_training(ds, SPEC, ScheduleConfig(), BatchPlan(16, 2), OPT)
        with pytest.raises(ValueError, match="smallest class has 2"):
            run_training(ds, SPEC, ScheduleConfig(), BatchPlan(8, 4), OPT)
        ds2 = small_dataset()
        with pytest.raises(ValueError, match="exceeds 4 classes"):
            run_training(ds2, SPEC, ScheduleConfig(rprime_size=5), PLAN, OPT)
        with pytest.raises(ValueError, match="exceed batch"):
            run_training(ds2, SPEC, ScheduleConfig(rprime_size=3), BatchPlan(4, 2), OPT)
        with pytest.raises(ValueError, match="hncm_anchors"):
            run_training(
                ds2, SPEC, ScheduleConfig(mining="hncm", hncm_anchors=9), PLAN, OPT
            )


class TestResolvers:
    def test_m_override_wins(self):
        assert resolve_m(ScheduleConfig(m_steps=7), PLAN, 10) == 7

    def test_m_derived_from_rho(self):
        assert resolve_m(ScheduleConfig(rho=6.0), BatchPlan(128, 2), 98) == 10

    def test_rprime_default(self):
        assert resolve_rprime(ScheduleConfig(), BatchPlan(8, 2), 10) == 4
        assert resolve_rprime(ScheduleConfig(), BatchPlan(8, 2), 3) == 3

    def test_eval_seed_deterministic(self):
        assert eval_seed(3, 5) == (3 * 1_000_003 + 5) % 2**31
        assert eval_seed(3, 5) == eval_seed(3, 5)
        assert eval_seed(3, 5) != eval_seed(3, 6)


class TestZeroGradientFixedPoint:
    def test_feasible_identity_net_does_not_move(self):
        # identity linear net, classes at antipodes of the unit circle:
        # every proximity constraint holds strictly, so the gradient is
        # exactly zero and the parameters stay bitwise put
        spec = MlpSpec(input_dim=2, hidden_dims=(), embed_dim=2)
        x = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
        ds = Dataset(x=x, labels=np.array([1, 1, 2, 2]), name="poles")
        sched = ScheduleConfig(
            loss_kind="projection",
            projection=ProjectionLossParams(eps_plus=0.5, eps_minus=1.0),
            lam=0.0,
            m_steps=3,
            max_projections=1,
        )
        plan = BatchPlan(batch_size=4, positives_per_class=2)
        state = init_state(ds, spec, sched, OPT, seed=0)
        identity = ParamVector(weights=[np.eye(2)], biases=[np.zeros(2)])
        state.theta = identity
        state.theta_anchor = identity.copy()
        state.adam = AdamState.create(identity)
        before = state.theta.to_flat().copy()
        index = ClassIndex.from_labels(ds.labels)
        record = run_projection(state, ds, index, spec, sched, plan, OPT)
        assert np.array_equal(state.theta.to_flat(), before)
        assert record.loss == 0.0
        assert record.displacement == 0.0


class TestDescent:
    def test_sgd_descends_on_the_same_batch(self):
        # the returned value is the objective at the pre-step parameters,
        # so two calls on a restored RNG compare f(theta0) and f(theta1);
        # backtracking on the learning rate must find descent
        ds = small_dataset(seed=3)
        index = ClassIndex.from_labels(ds.labels)
        kinds = ("margin", "contrastive", "triplet", "projection")
        for trial in range(20):
            kind = kinds[trial % 4]
            plan = BatchPlan(8, 2, "triplets") if kind == "triplet" else PLAN
            sched = ScheduleConfig(
                loss_kind=kind,
                projection=ProjectionLossParams(0.4, 1.0) if kind == "projection" else None,
                lam=1e-3 if trial % 2 else 0.0,
                m_steps=1,
                max_projections=1,
            )
            state = init_state(ds, SPEC, sched, OPT, seed=100 + trial)
            reps = sample_representatives(index, state.rng, state.used)
            theta0 = state.theta
            rng_snap = state.rng.bit_generator.state
            descended = False
            for lr in (1e-2 / 2**i for i in range(14)):
                opt = OptimizerConfig(kind="sgd", lr=lr)
                state.theta = theta0
                state.rng.bit_generator.state = rng_snap
                v0 = projection_step(state, reps, ds, index, SPEC, sched, plan, opt)
                state.rng.bit_generator.state = rng_snap
                v1 = projection_step(state, reps, ds, index, SPEC, sched, plan, opt)
                if v1 <= v0 + 1e-12:
                    descended = True
                    break
            assert descended, f"no descent for {kind} at trial {trial}"


class TestRunProjection:
    def test_counts_and_anchor_move(self):
        ds = small_dataset()
        sched = ScheduleConfig(m_steps=4, max_projections=10)
        state = init_state(ds, SPEC, sched, OPT, seed=1)
        index = ClassIndex.from_labels(ds.labels)
        record = run_projection(state, ds, index, SPEC, sched, PLAN, OPT)
        assert state.k == 1
        assert state.total_steps == 4
        assert record.k == 1
        assert record.steps == 4
        assert record.loss == state.last_loss
        assert np.array_equal(state.theta.to_flat(), state.theta_anchor.to_flat())
        assert anchor_displacement(state) == 0.0
        run_projection(state, ds, index, SPEC, sched, PLAN, OPT)
        assert state.k == 2
        assert state.total_steps == 8
        assert len(state.history) == 2

    def test_m1_moves_anchor_every_step(self):
        ds = small_dataset()
        sched = ScheduleConfig(m_steps=1, max_projections=3)
        state = run_training(ds, SPEC, sched, PLAN, OPT, seed=2)
        assert state.k == 3
        assert state.total_steps == 3
        for record in state.history:
            assert record.steps == 1
            assert record.displacement > 0.0
        assert anchor_displacement(state) == 0.0

    def test_zero_budget_leaves_state_untouched(self):
        ds = small_dataset()
        sched = ScheduleConfig(m_steps=2, max_projections=0)
        state = init_state(ds, SPEC, sched, OPT, seed=3)
        before = state.theta.to_flat().copy()
        calls = []
        out = run_training(
            ds, SPEC, sched, PLAN, OPT, seed=3,
            eval_hook=lambda s: calls.append(s.k), resume=state,
        )
        assert out.k == 0
        assert out.total_steps == 0
        assert out.history == []
        assert np.array_equal(out.theta.to_flat(), before)
        assert calls == [0]

    def test_cycle_bookkeeping(self):
        ds = small_dataset(per_class=2)
        sched = ScheduleConfig(m_steps=1, max_projections=10)
        state = init_state(ds, SPEC, sched, OPT, seed=4)
        index = ClassIndex.from_labels(ds.labels)
        run_projection(state, ds, index, SPEC, sched, PLAN, OPT)
        run_projection(state, ds, index, SPEC, sched, PLAN, OPT)
        assert state.cycle_id == 0
        assert state.draws_in_cycle == 2
        assert all(len(v) == 2 for v in state.used.values())
        run_projection(state, ds, index, SPEC, sched, PLAN, OPT)
        assert state.cycle_id == 1
        assert state.draws_in_cycle == 1
        assert all(len(v) == 1 for v in state.used.values())

    def test_history_bitwise_reproducible(self):
        ds = small_dataset(seed=6)
        sched = ScheduleConfig(m_steps=2, max_projections=5)

        def run():
            return run_training(ds, SPEC, sched, PLAN, OPT, seed=8)

        a, b = run(), run()
        assert [r.loss for r in a.history] == [r.loss for r in b.history]
        assert [r.displacement for r in a.history] == [r.displacement for r in b.history]
        assert np.array_equal(a.theta.to_flat(), b.theta.to_flat())

    def test_lambda_anneal_shrinks_lam(self):
        ds = small_dataset()
        sched = ScheduleConfig(m_steps=1, max_projections=3, lam=1.0, lambda_anneal=0.5)
        state = run_training(ds, SPEC, sched, PLAN, OPT, seed=1)
        assert state.lam == pytest.approx(0.125)


class TestSingleStepEquivalence:
    def test_m1_lam0_projection_loop_equals_conventional(self):
        ds = small_dataset(seed=5)
        sched = ScheduleConfig(loss_kind="margin", lam=0.0, m_steps=1, max_projections=12)
        a = run_training(ds, SPEC, sched, PLAN, OPT, seed=9)
        b = run_conventional(ds, SPEC, sched, PLAN, OPT, seed=9)
        assert a.total_steps == b.total_steps == 12
        assert [r.loss for r in a.history] == [r.loss for r in b.history]
        assert np.array_equal(a.theta.to_flat(), b.theta.to_flat())

    def test_conventional_forces_lam_zero(self):
        ds = small_dataset()
        sched = ScheduleConfig(lam=5.0, m_steps=1, max_projections=2)
        state = run_conventional(ds, SPEC, sched, PLAN, OPT, seed=0)
        assert state.lam == 0.0
        assert all(r.displacement == 0.0 for r in state.history)
        assert all(r.steps == 1 for r in state.history)


class TestAnchorPull:
    def test_large_lambda_shrinks_displacement(self):
        ds = small_dataset(seed=7, n_classes=4, per_class=4, dim=4)
        spec = MlpSpec(input_dim=4, hidden_dims=(6,), embed_dim=3)

        def mean_displacement(lam):
            sched = ScheduleConfig(m_steps=3, max_projections=6, lam=lam)
            state = run_training(ds, spec, sched, PLAN, OPT, seed=7)
            return float(np.mean([r.displacement for r in state.history]))

        assert mean_displacement(1e3) < mean_displacement(1e-3)


class TestToyFeasibilityDrive:
    def test_two_antipodal_classes_become_feasible(self):
        # duplicated points, a linear net into the unit circle: training on
        # the proximity hinges must pull the classes at least eps_minus apart
        x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        ds = Dataset(x=x, labels=np.array([1, 1, 2, 2]), name="toy")
        spec = MlpSpec(input_dim=2, hidden_dims=(), embed_dim=2)
        sched = ScheduleConfig(
            loss_kind="projection",
            projection=ProjectionLossParams(eps_plus=0.5, eps_minus=1.0),
            lam=1e-3,
            m_steps=5,
            max_projections=200,
        )
        plan = BatchPlan(batch_size=4, positives_per_class=2)
        state = run_training(ds, spec, sched, plan, OPT, seed=12)
        emb = embed_batch(ds.x, state.theta, spec)
        report = check_full(emb, ds.labels, ConstraintSpec(0.5, 1.0))
        assert report.max_violation < 1e-3


class TestConvergence:
    def test_tolerance_with_patience_stops_early(self):
        ds = small_dataset()
        sched = ScheduleConfig(
            m_steps=1, max_projections=50, convergence_tol=1e9, convergence_patience=2
        )
        state = run_training(ds, SPEC, sched, PLAN, OPT, seed=0)
        assert state.k == 2

    def test_disabled_by_default(self):
        ds = small_dataset()
        sched = ScheduleConfig(m_steps=1, max_projections=4)
        state = run_training(ds, SPEC, sched, PLAN, OPT, seed=0)
        assert state.k == 4


class TestEvalHook:
    def test_cadence_with_trailing_eval(self):
        ds = small_dataset()
        calls = []
        sched = ScheduleConfig(m_steps=1, max_projections=5, eval_every=2)
        run_training(ds, SPEC, sched, PLAN, OPT, seed=0, eval_hook=lambda s: calls.append(s.k))
        assert calls == [2, 4, 5]

    def test_no_double_eval_on_boundary(self):
        ds = small_dataset()
        calls = []
        sched = ScheduleConfig(m_steps=1, max_projections=4, eval_every=2)
        run_training(ds, SPEC, sched, PLAN, OPT, seed=0, eval_hook=lambda s: calls.append(s.k))
        assert calls == [2, 4]

    def test_eval_every_zero_final_only(self):
        ds = small_dataset()
        calls = []
        sched = ScheduleConfig(m_steps=1, max_projections=3, eval_every=0)
        run_training(ds, SPEC, sched, PLAN, OPT, seed=0, eval_hook=lambda s: calls.append(s.k))
        assert calls == [3]


class TestCheckpoint:
    def make_trained(self, tmp_path, projections=3):
        ds = small_dataset(seed=4)
        sched = ScheduleConfig(m_steps=2, max_projections=projections)
        state = run_training(ds, SPEC, sched, PLAN, OPT, seed=21)
        path = tmp_path / "ck.txt"
        save_checkpoint(path, state, SPEC, OPT, config_hash="abc123")
        return ds, sched, state, path

    def test_round_trip_equality(self, tmp_path):
        _, _, state, path = self.make_trained(tmp_path)
        loaded, spec2, opt2, hash2 = load_checkpoint(path)
        assert spec2 == SPEC
        assert opt2 == OPT
        assert hash2 == "abc123"
        assert loaded.k == state.k
        assert loaded.total_steps == state.total_steps
        assert loaded.cycle_id == state.cycle_id
        assert loaded.draws_in_cycle == state.draws_in_cycle
        assert loaded.adam.t == state.adam.t
        assert loaded.lam == state.lam
        assert loaded.last_loss == state.last_loss
        assert np.array_equal(loaded.theta.to_flat(), state.theta.to_flat())
        assert np.array_equal(loaded.theta_anchor.to_flat(), state.theta_anchor.to_flat())
        assert np.array_equal(loaded.adam.m.to_flat(), state.adam.m.to_flat())
        assert np.array_equal(loaded.adam.v.to_flat(), state.adam.v.to_flat())
        assert loaded.rng.bit_generator.state == state.rng.bit_generator.state
        assert np.array_equal(loaded.cache.classes, state.cache.classes)
        assert np.array_equal(loaded.cache.embeddings, state.cache.embeddings)
        assert np.array_equal(loaded.cache.staleness, state.cache.staleness)
        assert np.array_equal(loaded.cache.initialized, state.cache.initialized)
        assert loaded.used == state.used

    def test_resume_matches_uninterrupted(self, tmp_path):
        # 4 projections, checkpoint, then 10 more (50 further steps) must
        # match a straight 14-projection run bit for bit
        ds = small_dataset(seed=4)
        sched_full = ScheduleConfig(m_steps=5, max_projections=14)
        straight = run_training(ds, SPEC, sched_full, PLAN, OPT, seed=33)

        sched_head = ScheduleConfig(m_steps=5, max_projections=4)
        head = run_training(ds, SPEC, sched_head, PLAN, OPT, seed=33)
        path = tmp_path / "resume.txt"
        save_checkpoint(path, head, SPEC, OPT)
        loaded, spec2, opt2, _ = load_checkpoint(path)
        tail = run_training(ds, spec2, sched_full, PLAN, opt2, resume=loaded)

        assert tail.k == straight.k == 14
        assert tail.total_steps == straight.total_steps == 70
        assert np.array_equal(tail.theta.to_flat(), straight.theta.to_flat())
        resumed_losses = [r.loss for r in tail.history]
        straight_tail = [r.loss for r in straight.history[4:]]
        assert resumed_losses == straight_tail
        assert [r.displacement for r in tail.history] == [
            r.displacement for r in straight.history[4:]
        ]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("nonsense\n")
        with pytest.raises(ValueError, match="not a checkpoint file"):
            load_checkpoint(path)

    def test_missing_section_rejected(self, tmp_path):
        _, _, _, path = self.make_trained(tmp_path)
        lines = path.read_text().splitlines()
        truncated = tmp_path / "trunc.txt"
        truncated.write_text("\n".join(lines[:2]) + "\n")
        with pytest.raises(ValueError, match=r"missing \[counters\] section"):
            load_checkpoint(truncated)

    def test_stray_line_rejected(self, tmp_path):
        _, _, _, path = self.make_trained(tmp_path)
        lines = path.read_text().splitlines()
        lines.insert(1, "stray text")
        broken = tmp_path / "broken.txt"
        broken.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="expected a section header"):
            load_checkpoint(broken)

    def test_magic_constant(self):
        assert CHECKPOINT_MAGIC == "profs-checkpoint 1"
