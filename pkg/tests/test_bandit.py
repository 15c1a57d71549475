import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invaudit.bandit import (
    BanditConfig, LabeledExample, RidgeAccumulator, TargetSchedule, ThetaModel, action_probabilities,
    batch_features, build_label, design, feature_dim, features, fit_arrays, fit_model, log_to_csv, predict,
    predict_all, run_bandit, schedule_violations, snapshots_from_text, snapshots_to_text,
)
from invaudit.errors import ContractViolation
from invaudit.policies import Newsvendor, Scaled
from invaudit.sim_core import Trajectory, simulate, simulate_batch
from invaudit.synthetic import RealizableEnvironment, online_agreement_curve

from conftest import random_config


def trajectory_with_rewards(rewards):
    n = len(rewards)
    z = np.zeros(n, dtype=np.int64)
    return Trajectory(z, np.zeros((n, 1), dtype=np.int64), z, z, z, z, z, z + 1, z,
                      np.asarray(rewards, dtype=float), 1.0)


class TestLabels:
    def test_h_zero_is_reward(self):
        assert build_label(trajectory_with_rewards([3.0, 4.0]), 1, 0, 0.9) == 4.0

    def test_flat_rewards(self):
        assert build_label(trajectory_with_rewards([2.5] * 10), 3, 4, 1.0) == pytest.approx(5 * 2.5)

    def test_arithmetic(self):
        assert build_label(trajectory_with_rewards([1, 2, 3]), 0, 2, 0.9) == pytest.approx(5.23)

    def test_window_must_fit(self):
        with pytest.raises(ContractViolation):
            build_label(trajectory_with_rewards([1, 2, 3]), 1, 2, 0.9)


class TestFeatures:
    def test_layout(self, base_config):
        x = features(base_config, 4, 9, [1, 2, 3], [5, 6, 7], H=4)
        assert x.shape == (feature_dim(4),) == (15,)
        assert list(x) == [10, 4, 0.5, 2, 4, 9, 3, 2, 1, 0, 7, 6, 5, 0, 1.0]

    def test_batch_matches_scalar(self):
        g = np.random.default_rng(1)
        configs = [random_config(g, T=30) for _ in range(5)]
        batch = simulate_batch([Newsvendor()] * 5, configs, [3] * 5, list(range(5)))
        statics = np.array([c.statics for c in configs])
        H = 6
        for t in (0, 4, 20):
            X = batch_features(batch, statics, np.arange(5), t, H)
            for i in range(5):
                tr = batch.trajectory(i)
                ref = features(configs[i], tr.on_hand_start[t], tr.pipeline_start[t].sum(),
                               tr.demand[:t], tr.orders[:t], H)
                assert np.array_equal(X[i], ref)


class TestModel:
    def test_predict_baseline_action(self):
        m = ThetaModel(np.array([1.0, 2.0]), np.array([5.0, 5.0]), np.array([7.0, 7.0]))
        assert predict(m, np.array([1.0, 1.0]), 1.0) == 3.0

    def test_predict_arithmetic(self):
        m = ThetaModel(np.array([1.0]), np.array([2.0]), np.array([3.0]))
        assert predict(m, np.array([1.0]), 1.2) == pytest.approx(1.52)

    def test_action_free_model(self):
        m = ThetaModel(np.array([1.0, -2.0]), np.zeros(2), np.zeros(2))
        p = predict_all(m, np.array([[3.0, 1.0]]), (0.8, 1.0, 1.2))
        assert np.all(p == 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            predict(ThetaModel.zeros(3), np.zeros(2), 1.0)

    def test_exact_recovery(self):
        g = np.random.default_rng(0)
        d = 7
        truth = ThetaModel.from_vector(g.normal(size=3 * d))
        X = g.normal(size=(3 * d, d))
        # 3d rows, d per action, so the stacked design is square and full rank
        a = np.repeat([0.8, 1.0, 1.2], d)
        y = design(X, a) @ truth.vector
        fit = fit_model([LabeledExample(x, ai, yi) for x, ai, yi in zip(X, a, y)], 0.0)
        assert np.max(np.abs(fit.vector - truth.vector)) < 1e-6

    def test_scalar_ridge_closed_form(self):
        # d = 1, one example at a = 1: only theta1 is touched; prediction y*x^2/(x^2+lam)
        x, y, lam = 2.0, 3.0, 0.5
        fit = fit_arrays(np.array([[x]]), np.array([1.0]), np.array([y]), lam)
        assert predict(fit, np.array([x]), 1.0) == pytest.approx(y * x * x / (x * x + lam))
        assert fit.theta2[0] == 0 and fit.theta3[0] == 0

    def test_zero_labels(self):
        X = np.random.default_rng(2).normal(size=(10, 3))
        fit = fit_arrays(X, np.ones(10), np.zeros(10), 1e-3)
        assert np.all(fit.vector == 0)

    def test_empty_history(self):
        with pytest.raises(ContractViolation):
            fit_model([], 0.1)

    def test_accumulator_equals_full_refit(self):
        g = np.random.default_rng(3)
        X = g.normal(size=(60, 4))
        a = g.choice([0.8, 1.0, 1.2], size=60)
        y = g.normal(size=60)
        acc = RidgeAccumulator(4)
        for lo in range(0, 60, 13):
            acc.add(X[lo:lo + 13], a[lo:lo + 13], y[lo:lo + 13])
        assert np.allclose(acc.solve(0.1).vector, fit_arrays(X, a, y, 0.1).vector, atol=1e-10)


class TestExploration:
    def test_tie_goes_to_baseline(self):
        assert list(action_probabilities([5, 5, 5], "epsilon_greedy", 0.0)) == [0.0, 1.0, 0.0]

    def test_epsilon_greedy(self):
        p = action_probabilities([1, 2, 3], "epsilon_greedy", 0.3)
        assert np.allclose(p, [0.1, 0.1, 0.8], atol=1e-12)

    def test_igw(self):
        p = action_probabilities([0, 0, 1], "inverse_gap_weighting", 10.0)
        assert p[0] == pytest.approx(1 / 13, abs=1e-15) and p[1] == pytest.approx(1 / 13, abs=1e-15)
        assert p[2] == pytest.approx(11 / 13, abs=1e-15)

    def test_unknown_scheme(self):
        with pytest.raises(ContractViolation):
            action_probabilities([0, 0, 1], "softmax", 1.0)

    def test_boost_handles_negative_predictions(self):
        p = action_probabilities([-10.0, -10.001, -20.0], "epsilon_greedy", 0.0, baseline_boost=0.01)
        assert p[1] == 1.0

    @settings(max_examples=200, deadline=None)
    @given(
        preds=st.lists(st.floats(-1e4, 1e4), min_size=3, max_size=3),
        rho=st.floats(0, 1), boost=st.floats(0, 0.5), extra=st.floats(0, 0.5),
        scheme=st.sampled_from(["epsilon_greedy", "inverse_gap_weighting"]),
    )
    def test_valid_and_boost_monotone(self, preds, rho, boost, extra, scheme):
        rho = rho if scheme == "epsilon_greedy" else 1 + 50 * rho
        p = action_probabilities(preds, scheme, rho, boost)
        assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9
        q = action_probabilities(preds, scheme, rho, boost + extra)
        assert q[1] >= p[1] - 1e-12

    def test_decay(self):
        eg = BanditConfig(exploration="epsilon_greedy", rho=0.5)
        assert eg.rho_at(1) == 0.5 and eg.rho_at(4) == 0.25
        igw = BanditConfig(rho=2.0)
        assert igw.rho_at(9) == 6.0
        assert BanditConfig(rho=2.0, decay=False).rho_at(9) == 2.0


class TestSchedule:
    def test_gap_violation_names_pair(self):
        problems = schedule_violations([10, 21], 12)
        assert problems and "(10, 21)" in problems[0]
        with pytest.raises(ContractViolation, match=r"\(10, 21\)"):
            TargetSchedule((10, 21), 12)

    def test_valid(self):
        assert schedule_violations([3, 15, 40], 12) == []


@pytest.fixture
def cohort():
    g = np.random.default_rng(11)
    return [random_config(g, T=40) for _ in range(6)]


class TestRunBandit:
    def test_empty_schedule_is_baseline(self, cohort):
        run = run_bandit(Newsvendor(), TargetSchedule((), 4), BanditConfig(H=4), cohort, seed=5)
        base = simulate_batch([Newsvendor()] * 6, cohort, [5] * 6, list(range(6)))
        assert np.array_equal(run.batch.orders, base.orders)
        assert run.log == [] and run.interventions == 0

    def test_multiplier_one_is_baseline(self, cohort):
        bc = BanditConfig(H=4, multipliers=(1.0,))
        run = run_bandit(Newsvendor(), TargetSchedule((5, 12), 4), bc, cohort, seed=5)
        base = simulate_batch([Newsvendor()] * 6, cohort, [5] * 6, list(range(6)))
        assert np.array_equal(run.batch.rewards, base.rewards)

    def test_off_schedule_fidelity_and_labels(self, cohort):
        bc = BanditConfig(H=4, exploration="epsilon_greedy", rho=1.0, decay=False)
        sched = TargetSchedule((2, 8, 14, 20, 26), 4)
        pol = Scaled(Newsvendor(), 0.5)
        run = run_bandit(pol, sched, bc, cohort, seed=9)
        for i, cfg in enumerate(cohort):
            tr = run.trajectory(i)
            for t in range(cfg.horizon_T):
                if t not in sched:
                    assert tr.orders[t] == pol.action(tr.state(t), cfg)
        assert run.examples
        for pid, tau, ex in run.examples:
            assert ex.y == pytest.approx(build_label(run.trajectory(pid), tau, 4, cohort[pid].gamma), rel=1e-12)
        assert {e.multiplier for e in run.log} == {0.8, 1.0, 1.2}

    def test_deterministic(self, cohort):
        bc = BanditConfig(H=4, exploration="epsilon_greedy", rho=0.5)
        a = run_bandit(Newsvendor(), TargetSchedule((3, 10, 20), 4), bc, cohort, seed=1)
        b = run_bandit(Newsvendor(), TargetSchedule((3, 10, 20), 4), bc, cohort, seed=1)
        assert log_to_csv(a.log, bc.multipliers) == log_to_csv(b.log, bc.multipliers)
        assert snapshots_to_text(a.snapshots) == snapshots_to_text(b.snapshots)

    def test_per_product_models(self, cohort):
        bc = BanditConfig(H=4, pooled=False, exploration="epsilon_greedy", rho=1.0, decay=False)
        run = run_bandit(Newsvendor(), TargetSchedule((2, 8, 14, 20), 4), bc, cohort, seed=2)
        assert run.snapshots and all(s.product_id is not None for s in run.snapshots)

    def test_snapshot_round_trip(self, cohort):
        bc = BanditConfig(H=4, exploration="epsilon_greedy", rho=1.0)
        run = run_bandit(Newsvendor(), TargetSchedule((2, 8, 14, 20), 4), bc, cohort, seed=2)
        back = snapshots_from_text(snapshots_to_text(run.snapshots))
        assert len(back) == len(run.snapshots)
        for s, r in zip(run.snapshots, back):
            assert s.week == r.week and np.array_equal(s.model.vector, r.model.vector)

    def test_log_csv_header(self, cohort):
        bc = BanditConfig(H=4)
        run = run_bandit(Newsvendor(), TargetSchedule((5,), 4), bc, cohort, seed=2)
        header = log_to_csv(run.log, bc.multipliers).splitlines()[0]
        assert header.startswith("product_id,week,baseline_order,multiplier_sampled,p_down,p_same,p_up")


def test_regret_shrinks_with_more_interventions():
    env = RealizableEnvironment.planted(8, seed=4, noise_sigma=0.5)
    curve = online_agreement_curve(env, BanditConfig(), [50, 2000], seed=4)
    assert curve[2000] > curve[50]
