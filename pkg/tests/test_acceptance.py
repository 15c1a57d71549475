"""Acceptance suite: one pass/fail line per criterion, printed in the terminal summary.

The cohort-scale checks (1 and 8) run the CLI on ``configs/default.yaml``.
"""
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from invaudit import cli
from invaudit.bandit import (
    BanditConfig, LabeledExample, TargetSchedule, ThetaModel, action_probabilities, design, feature_dim, fit_model,
)
from invaudit.evaluation import brute_force_equilibrium_gap, oracle_best
from invaudit.policies import BaseStock, Newsvendor, Scaled
from invaudit.sim_core import simulate
from invaudit.synthetic import RealizableEnvironment, online_agreement_curve

from conftest import random_config

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = ROOT / "configs" / "default.yaml"
MULT = (0.8, 1.0, 1.2)


class Replay:
    def __init__(self, orders):
        self.orders = orders

    def action(self, state, config):
        return int(self.orders[state.t])


@pytest.fixture(scope="module")
def default_audit(tmp_path_factory):
    out = tmp_path_factory.mktemp("audit_a")
    start = time.perf_counter()
    code = cli.main(["audit", "--config", str(DEFAULT_CONFIG), "--out", str(out), "--format", "machine"])
    elapsed = time.perf_counter() - start
    assert code == 0
    return out, elapsed


def test_criterion_1_table_pattern(default_audit, acceptance_line):
    out, elapsed = default_audit
    data = json.loads((out / "report.json").read_text())
    rows = {r["policy_name"]: r for r in data["reports"]}
    nv, half, double, tuned = (rows[k] for k in ("newsvendor", "newsvendor/2", "newsvendor*2", "tuned base-stock"))
    share = lambda r, k: r["action_shares"][k]  # noqa: E731
    checks = {
        "a": share(nv, "same") >= 0.90 and nv["delta_I"] is not None and abs(nv["delta_I"]) <= 0.2,
        "b": share(half, "up") >= 0.80 and half["delta_I"] >= 0.5,
        "c": share(double, "down") > share(double, "up") and 0 < double["delta_I"] < half["delta_I"],
        "d": share(tuned, "same") >= 0.90,
        "time": elapsed <= 300,
    }
    fmt = lambda r: "{%.1f, %.1f, %.1f} dI=%s" % (  # noqa: E731
        *(100 * share(r, k) for k in ("down", "same", "up")),
        "undef" if r["delta_I"] is None else f"{r['delta_I']:+.3f}")
    detail = (f"nv {fmt(nv)}; nv/2 {fmt(half)}; nv*2 {fmt(double)}; tuned {fmt(tuned)}; "
              f"{data['meta']['n_products']} products in {elapsed:.0f}s; failed parts: "
              f"{[k for k, v in checks.items() if not v] or 'none'}")
    assert acceptance_line(1, all(checks.values()), detail)


def test_criterion_2_realizability_recovery(acceptance_line):
    g = np.random.default_rng(2)
    d = feature_dim(12)
    truth = ThetaModel.from_vector(g.normal(size=3 * d))
    # zero noise, exactly 3d examples: d per action so the stacked design is full rank
    X = g.normal(size=(3 * d, d))
    a = np.repeat(MULT, d)
    y = design(X, a) @ truth.vector
    fit = fit_model([LabeledExample(x, ai, yi) for x, ai, yi in zip(X, a, y)], 0.0)
    err = float(np.max(np.abs(fit.vector - truth.vector)))
    # noisy labels at n = 50d, evaluated on fresh noisy held-out labels
    sigma, n = 2.0, 50 * d
    X = g.normal(size=(n, d))
    a = g.choice(MULT, size=n)
    y = design(X, a) @ truth.vector + sigma * g.normal(size=n)
    fit_noisy = fit_model([LabeledExample(x, ai, yi) for x, ai, yi in zip(X, a, y)], 0.0)
    Xh = g.normal(size=(2000, d))
    ah = g.choice(MULT, size=2000)
    yh = design(Xh, ah) @ truth.vector + sigma * g.normal(size=2000)
    rmse = float(np.sqrt(np.mean((design(Xh, ah) @ fit_noisy.vector - yh) ** 2)))
    ok = err <= 1e-6 and rmse <= 1.5 * sigma
    assert acceptance_line(2, ok, f"max|theta-theta*| = {err:.2e} (<= 1e-6); held-out RMSE {rmse:.3f} "
                                  f"<= 1.5 sigma = {1.5 * sigma}")


def test_criterion_3_best_action_agreement(acceptance_line):
    env = RealizableEnvironment.planted(feature_dim(12), seed=3, noise_sigma=1.0)
    checkpoints = [100, 500, 2000, 5000]
    curve = online_agreement_curve(env, BanditConfig(), checkpoints, n_heldout=200, seed=3)
    vals = [curve[k] for k in checkpoints]
    monotone = all(b >= a - 0.02 for a, b in zip(vals, vals[1:]))
    ok = curve[5000] >= 0.95 and monotone
    assert acceptance_line(3, ok, "agreement " + ", ".join(f"{k}: {100 * curve[k]:.1f}%" for k in checkpoints))


def test_criterion_4_reduction_consistency(acceptance_line):
    g = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        T = int(g.integers(6, 20))
        cfg = random_config(g, T=T, L=int(g.integers(1, 4)))
        pol = [Newsvendor(), Scaled(Newsvendor(), 0.5), Scaled(Newsvendor(), 2.0), BaseStock(int(g.integers(0, 40)))][i % 4]
        week = int(g.integers(0, T))
        seed = int(g.integers(0, 2**31))
        gap = brute_force_equilibrium_gap(pol, cfg, seed, TargetSchedule((week,), 3), MULT)
        _, best = oracle_best(pol, cfg, seed, week, MULT)
        base = simulate(pol, cfg, seed).total_discounted_reward
        worst = max(worst, abs(gap - (best - base) / T))
    exact = 0
    for i in range(100):
        T = int(g.integers(10, 20))
        cfg = random_config(g, T=T, L=int(g.integers(1, 4)))
        pol = Scaled(Newsvendor(), float(g.choice([0.5, 1.0, 2.0])))
        w1 = int(g.integers(0, T - 4))
        w2 = int(g.integers(w1 + 3, T))
        seed = int(g.integers(0, 2**31))
        gap = brute_force_equilibrium_gap(pol, cfg, seed, TargetSchedule((w1, w2), 3), MULT)
        totals = [simulate(pol, cfg, seed, multipliers={w1: a, w2: b}).total_discounted_reward
                  for a, b in itertools.product(MULT, repeat=2)]
        exact += gap == (max(totals) - totals[4]) / T
    ok = worst <= 1e-9 and exact == 100
    assert acceptance_line(4, ok, f"single-week max |diff| {worst:.1e} (<= 1e-9); two-week exact {exact}/100")


def test_criterion_5_coupling(acceptance_line):
    g = np.random.default_rng(5)
    pairs, coupled, good = 0, 0, 0
    while pairs < 1000:
        T = 40
        cfg = random_config(g, T=T, L=int(g.integers(1, 4)))
        rate = cfg.demand_model.base_rate
        orders = np.where(g.random(T) < 0.5, 0, g.poisson(rate, size=T))
        t0 = int(g.integers(0, T - 5))
        other = orders.copy()
        other[t0] = orders[t0] + int(g.integers(1, 10)) if g.random() < 0.5 or orders[t0] == 0 else 0
        seed = int(g.integers(0, 2**31))
        a = simulate(Replay(orders), cfg, seed)
        b = simulate(Replay(other), cfg, seed)
        pairs += 1
        empty = lambda tr, t: tr.on_hand_start[t] == 0 and not tr.pipeline_start[t].any()  # noqa: E731
        tc = next((t for t in range(t0 + 1, T) if empty(a, t) and empty(b, t)), None)
        if tc is None:
            continue
        coupled += 1
        same_states = (np.array_equal(a.on_hand_start[tc:], b.on_hand_start[tc:])
                       and np.array_equal(a.pipeline_start[tc:], b.pipeline_start[tc:]))
        diff = b.rewards - a.rewards
        quiet = not diff[:t0].any() and not diff[tc:].any()
        good += same_states and quiet
    ok = coupled > 0 and good == coupled
    assert acceptance_line(5, ok, f"{good}/{coupled} coupled pairs identical after coupling with zero reward "
                                  f"difference outside [t0, tc) ({pairs} pairs drawn)")


def test_criterion_6_simulator_invariants(acceptance_line):
    g = np.random.default_rng(6)
    steps, failures, worst_rel = 0, 0, 0.0
    while steps < 1_000_000:
        T = 50
        L = int(g.integers(1, 5))
        cfg = random_config(g, T=T, L=L)
        orders = np.where(g.random(T) < 0.3, 0, g.poisson(cfg.demand_model.base_rate * g.uniform(0.3, 2.5), size=T))
        tr = simulate(Replay(orders), cfg, int(g.integers(0, 2**31)), product_id=steps)
        steps += T
        nonneg = (tr.on_hand_start >= 0).all() and (tr.pipeline_start >= 0).all() and (tr.on_hand_end >= 0).all()
        sales_ok = (np.array_equal(tr.sales, np.minimum(tr.demand, tr.on_hand_start + tr.arrivals))
                    and np.array_equal(tr.lost_sales, tr.demand - tr.sales))
        balance = np.array_equal(tr.on_hand_end, tr.on_hand_start + tr.arrivals - tr.sales)
        chained = np.array_equal(tr.on_hand_start[1:], tr.on_hand_end[:-1])
        arrivals = np.zeros(T + L + 1, dtype=np.int64)
        np.add.at(arrivals, np.arange(T) + tr.lead_times, tr.orders)
        conserved = np.array_equal(tr.arrivals, arrivals[:T])
        in_flight = tr.pipeline_start[-1].sum() - tr.arrivals[-1] + tr.orders[-1]
        units = (cfg.initial_on_hand + tr.orders.sum() == tr.on_hand_end[-1] + in_flight + tr.sales.sum())
        recon = math.fsum(cfg.gamma ** t * float(r) for t, r in enumerate(tr.rewards))
        rel = abs(tr.total_discounted_reward - recon) / max(1.0, abs(recon))
        worst_rel = max(worst_rel, rel)
        failures += not (nonneg and sales_ok and balance and chained and conserved and units and rel <= 1e-6)
    ok = failures == 0
    assert acceptance_line(6, ok, f"{steps} random steps, {failures} trajectories violating an invariant; "
                                  f"worst discounted-total relative error {worst_rel:.1e}")


def test_criterion_7_exploration_math(acceptance_line):
    eg = action_probabilities([1, 2, 3], "epsilon_greedy", 0.3)
    igw = action_probabilities([0, 0, 1], "inverse_gap_weighting", 10.0)
    exact = (np.allclose(eg, [0.1, 0.1, 0.8], rtol=0, atol=1e-15)
             and np.allclose(igw, [1 / 13, 1 / 13, 11 / 13], rtol=0, atol=1e-15))
    g = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20_000):
        preds = g.normal(scale=10 ** g.uniform(-3, 4), size=int(g.integers(2, 6)))
        k = len(preds)
        mult_index = int(g.integers(0, k))
        scheme = "epsilon_greedy" if g.random() < 0.5 else "inverse_gap_weighting"
        rho = g.random() if scheme == "epsilon_greedy" else g.uniform(0.01, 1000)
        p = action_probabilities(preds, scheme, rho, g.uniform(0, 0.1), mult_index)
        worst = max(worst, abs(p.sum() - 1.0) if (p >= 0).all() else 1.0)
    ok = exact and worst <= 1e-9
    assert acceptance_line(7, ok, f"worked examples exact: {exact}; worst |sum - 1| over 20000 draws {worst:.1e}")


def test_criterion_8_determinism(default_audit, tmp_path, acceptance_line):
    first, _ = default_audit
    second = tmp_path / "audit_b"
    assert cli.main(["audit", "--config", str(DEFAULT_CONFIG), "--out", str(second), "--format", "machine"]) == 0
    a = (first / "report.json").read_bytes()
    b = (second / "report.json").read_bytes()
    ok = a == b
    assert acceptance_line(8, ok, f"report.json byte-identical across two runs ({len(a)} bytes)")
