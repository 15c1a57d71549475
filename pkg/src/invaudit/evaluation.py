"""Equilibrium certification and the improvement metric.

Everything here is computed from counterfactual rollouts under common random
numbers: candidate action sequences for a product replay the exact demand and
lead-time draws of the baseline, so per-seed comparisons are exact.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from invaudit.bandit import (
    LogEntry, Snapshot, TargetSchedule, boost_baseline, features, greedy_index, predict_all,
)
from invaudit.errors import ContractViolation
from invaudit.sim_core import ProductConfig, Trajectory, simulate_batch

DEFAULT_MULTIPLIERS = (0.8, 1.0, 1.2)
UNDEFINED = "undefined (baseline optimal)"
MAX_ASSIGNMENTS = 3 ** 8


def rollout_rewards(policies, configs, seeds, product_ids, weeks, multipliers=DEFAULT_MULTIPLIERS) -> np.ndarray:
    """Total discounted reward for every (row, multiplier) single-week deviation.

    Returns an ``(n, K)`` array; column ``j`` replays row ``i`` with its
    ``weeks[i]`` order scaled by ``multipliers[j]``.
    """
    n, K = len(configs), len(multipliers)
    T = configs[0].horizon_T
    if any(not 0 <= w < T for w in weeks):
        raise ContractViolation("deviation week outside horizon")
    M = np.ones((n * K, T))
    for j, m in enumerate(multipliers):
        M[np.arange(n) * K + j, np.asarray(weeks)] = m
    rep = lambda xs: [x for x in xs for _ in range(K)]  # noqa: E731
    batch = simulate_batch(rep(policies), rep(configs), rep(seeds), rep(product_ids), M)
    return batch.total_discounted_reward.reshape(n, K)


def best_index(rewards: np.ndarray, multipliers: Sequence[float]) -> np.ndarray:
    """Argmax per row; ties go to multiplier 1, then to the lower multiplier."""
    return greedy_index(np.atleast_2d(rewards), list(multipliers).index(1.0))


def oracle_best(
    policy, config: ProductConfig, seed: int, week: int,
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS, product_id: int = 0,
) -> tuple[float, float]:
    """Hindsight-best multiplier at ``week`` and its total discounted reward."""
    if not 0 <= week < config.horizon_T:
        raise ContractViolation(f"week {week} outside horizon")
    r = rollout_rewards([policy], [config], [seed], [product_id], [week], multipliers)
    j = int(best_index(r, multipliers)[0])
    return float(multipliers[j]), float(r[0, j])


def delta_I(r_bandit: float, r_baseline: float, r_oracle: float) -> float | None:
    """Fraction of the oracle's improvement the bandit captured.

    Returns None when the oracle gap is numerically zero (baseline optimal).
    """
    vals = (r_bandit, r_baseline, r_oracle)
    if not all(np.isfinite(v) for v in vals):
        raise ContractViolation("rewards must be finite")
    gap = r_oracle - r_baseline
    if abs(gap) < 1e-9 * max(1.0, abs(r_baseline)):
        return None
    return (r_bandit - r_baseline) / gap


# ---------------------------------------------------------------------------
# passive audit


@dataclass(frozen=True)
class WeekAudit:
    week: int
    status: str  # "in_equilibrium", "out_of_equilibrium" or "unauditable"
    argmax_multiplier: float | None = None
    snapshot_week: int | None = None
    predictions: tuple[float, ...] = ()


def trajectory_features(trajectory: Trajectory, config: ProductConfig, t: int, H: int) -> np.ndarray:
    return features(
        config,
        int(trajectory.on_hand_start[t]),
        int(trajectory.pipeline_start[t].sum()),
        trajectory.demand[:t],
        trajectory.orders[:t],
        H,
    )


def passive_audit(
    policy,
    snapshots: Sequence[Snapshot],
    trajectory: Trajectory,
    config: ProductConfig,
    H: int,
    boost: float = 0.0,
    tolerance: float = 0.0,
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS,
    weeks: Sequence[int] | None = None,
    product_id: int | None = None,
) -> list[WeekAudit]:
    """Check, week by week, whether the policy's own action is model-optimal.

    Week ``t`` is judged by the latest snapshot fitted at or before ``t``
    (pooled snapshots, or those of ``product_id``). The policy's action is
    multiplier 1; it passes when its boosted prediction is within
    ``tolerance * |best|`` of the best boosted prediction. Nothing is played.
    """
    del policy  # the audited action is the policy's own, i.e. multiplier 1
    base = list(multipliers).index(1.0)
    snaps = sorted(
        (s for s in snapshots if s.product_id is None or s.product_id == product_id),
        key=lambda s: s.week,
    )
    snap_weeks = [s.week for s in snaps]
    out = []
    for t in (range(trajectory.horizon) if weeks is None else weeks):
        i = int(np.searchsorted(snap_weeks, t, side="right")) - 1
        if i < 0:
            out.append(WeekAudit(t, "unauditable"))
            continue
        snap = snaps[i]
        x = trajectory_features(trajectory, config, t, H)
        preds = predict_all(snap.model, x[None, :], multipliers)
        boosted = boost_baseline(preds, boost, base)[0]
        j = int(greedy_index(boosted[None, :], base)[0])
        best = boosted[j]
        ok = boosted[base] >= best - tolerance * abs(best)
        out.append(WeekAudit(
            t, "in_equilibrium" if ok else "out_of_equilibrium",
            float(multipliers[j]), snap.week, tuple(float(v) for v in preds[0]),
        ))
    return out


# ---------------------------------------------------------------------------
# brute-force equilibrium gap


def equilibrium_gap_samples(
    policy, config: ProductConfig, seeds: Sequence[int], schedule: TargetSchedule,
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS, product_id: int = 0,
) -> np.ndarray:
    """Per-seed ``(max_assignment R_T - R_T(policy)) / T`` by exhaustive search."""
    weeks = list(schedule.times)
    T = config.horizon_T
    if any(not 0 <= w < T for w in weeks):
        raise ContractViolation("schedule week outside horizon")
    n_assign = len(multipliers) ** len(weeks)
    if n_assign > MAX_ASSIGNMENTS:
        raise ContractViolation(f"{n_assign} assignments exceed the cap of {MAX_ASSIGNMENTS}")
    if not weeks:
        return np.zeros(len(seeds))
    assignments = list(itertools.product(multipliers, repeat=len(weeks)))
    M = np.ones((len(assignments), T))
    M[:, weeks] = np.array(assignments)
    gaps = []
    for s in seeds:
        n = len(assignments)
        r = simulate_batch([policy] * n, [config] * n, [s] * n, [product_id] * n, M).total_discounted_reward
        base = assignments.index(tuple([1.0] * len(weeks)))
        gaps.append((r.max() - r[base]) / T)
    return np.array(gaps)


def brute_force_equilibrium_gap(
    policy, config: ProductConfig, seed: int, schedule: TargetSchedule,
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS, n_seeds: int = 1, product_id: int = 0,
) -> float:
    """Empirical per-period equilibrium gap, averaged over ``n_seeds`` seeds."""
    seeds = [seed + i for i in range(n_seeds)]
    return float(equilibrium_gap_samples(policy, config, seeds, schedule, multipliers, product_id).mean())


# ---------------------------------------------------------------------------
# reports


@dataclass
class AuditReport:
    policy_name: str
    action_shares: tuple[float, float, float]
    delta_I: float | None
    n_products: int
    epsilon_hat: float | None = None
    epsilon_stderr: float | None = None
    n_interventions: int = 0
    oracle_shares: tuple[float, float, float] = (0.0, 1.0, 0.0)
    per_product_delta_I: list[float | None] = field(default_factory=list)
    seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["action_shares"] = dict(zip(("down", "same", "up"), self.action_shares))
        d["oracle_shares"] = dict(zip(("down", "same", "up"), self.oracle_shares))
        d["delta_I_percent"] = None if self.delta_I is None else 100.0 * self.delta_I
        return d


def direction_shares(chosen: Sequence[float]) -> tuple[float, float, float]:
    """Fractions of multipliers below, equal to and above 1."""
    chosen = np.asarray(chosen, dtype=float)
    if chosen.size == 0:
        return (0.0, 1.0, 0.0)
    down = float(np.mean(chosen < 1.0))
    up = float(np.mean(chosen > 1.0))
    return (down, 1.0 - down - up, up)


def build_report(
    policy_name: str,
    log: Sequence[LogEntry],
    r_bandit: Sequence[float] | None = None,
    r_baseline: Sequence[float] | None = None,
    r_oracle: Sequence[float] | None = None,
    oracle_multipliers: Sequence[float] | None = None,
    epsilon: tuple[float, float] | None = None,
    seeds: dict | None = None,
) -> AuditReport:
    """Aggregate an action log and per-product rewards into one report row.

    The cohort ``delta_I`` is a single ratio of summed rewards; per-product
    ratios are kept alongside.
    """
    shares = direction_shares([e.multiplier for e in log])
    dI, per_product = None, []
    if r_bandit is not None and len(r_bandit):
        rb, r0, ro = (np.asarray(v, dtype=float) for v in (r_bandit, r_baseline, r_oracle))
        dI = delta_I(float(rb.sum()), float(r0.sum()), float(ro.sum()))
        per_product = [delta_I(b, r, o) for b, r, o in zip(rb, r0, ro)]
    eps, err = epsilon if epsilon is not None else (None, None)
    return AuditReport(
        policy_name=policy_name,
        action_shares=shares,
        delta_I=dI,
        n_products=len({e.product_id for e in log}),
        epsilon_hat=eps,
        epsilon_stderr=err,
        n_interventions=len(log),
        oracle_shares=direction_shares(oracle_multipliers if oracle_multipliers is not None else []),
        per_product_delta_I=per_product,
        seeds=dict(seeds or {}),
    )


def format_table(reports: Sequence[AuditReport]) -> str:
    """Aligned text table: shares in percent, improvement as fraction and percent."""
    header = ["Policy", "Percent actions {down, same, up}", "dI", "dI %", "eps_hat", "products"]
    rows = []
    for r in reports:
        shares = "{" + ", ".join(f"{100 * s:.1f}" for s in r.action_shares) + "}"
        if r.delta_I is None:
            di, dip = UNDEFINED, "-"
        else:
            di, dip = f"{r.delta_I:+.3f}", f"{100 * r.delta_I:+.1f}"
        eps = "-" if r.epsilon_hat is None else f"{r.epsilon_hat:.4g}"
        rows.append([r.policy_name + " + bandit", shares, di, dip, eps, str(r.n_products)])
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    lines = [fmt(header), "-+-".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def reports_to_json(reports: Sequence[AuditReport], meta: dict | None = None) -> str:
    payload = {"meta": meta or {}, "reports": [r.to_dict() for r in reports]}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def joint_oracle(
    policies, configs, seeds, product_ids, schedules: Sequence[Sequence[int]],
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS,
) -> tuple[np.ndarray, np.ndarray, list[tuple[float, ...]]]:
    """Exhaustive hindsight-best assignment over each row's scheduled weeks.

    Returns baseline rewards, best rewards and the best assignment per row.
    Ties prefer the all-ones assignment, then enumeration order.
    """
    T = configs[0].horizon_T
    base_r, best_r, best_a = [], [], []
    for pol, cfg, seed, pid, weeks in zip(policies, configs, seeds, product_ids, schedules):
        weeks = list(weeks)
        if len(multipliers) ** len(weeks) > MAX_ASSIGNMENTS:
            raise ContractViolation("schedule too long for exhaustive oracle")
        ones = tuple([1.0] * len(weeks))
        assignments = [ones] + [a for a in itertools.product(multipliers, repeat=len(weeks)) if a != ones]
        M = np.ones((len(assignments), T))
        if weeks:
            M[:, weeks] = np.array(assignments)
        n = len(assignments)
        r = simulate_batch([pol] * n, [cfg] * n, [seed] * n, [pid] * n, M).total_discounted_reward
        j = int(np.argmax(r))
        base_r.append(r[0])
        best_r.append(r[j])
        best_a.append(assignments[j])
    return np.array(base_r), np.array(best_r), best_a
