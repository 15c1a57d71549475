"""Contextual-bandit auditor over action multipliers.

On scheduled target weeks the bandit fits a reward model to the historical
H-step labels, scores every multiplier of the baseline order, and samples one
from an exploration distribution. On every other week the baseline policy is
played untouched.

The reward model is linear in the context with a quadratic action term::

    f(x, a) = theta1 @ x + (a - 1) * theta2 @ x + (a - 1)**2 * theta3 @ x
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from invaudit import rng
from invaudit.errors import ContractViolation
from invaudit.sim_core import BatchRunner, BatchTrajectory, ProductConfig, Trajectory

EXPLORATION_SCHEMES = ("epsilon_greedy", "inverse_gap_weighting")
N_STATIC = 4


@dataclass(frozen=True)
class BanditConfig:
    H: int = 12
    rho: float = 1.0
    exploration: str = "inverse_gap_weighting"
    multipliers: tuple[float, ...] = (0.8, 1.0, 1.2)
    baseline_boost: float = 0.0
    ridge_lambda: float = 1e-3
    decay: bool = True
    pooled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))
        m = self.multipliers
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ContractViolation("multipliers must be strictly increasing")
        if m[0] <= 0 or 1.0 not in m:
            raise ContractViolation("multipliers must be positive and contain 1.0")
        if self.H < 0:
            raise ContractViolation("H must be >= 0")
        if self.rho < 0:
            raise ContractViolation("rho must be >= 0")
        if self.exploration not in EXPLORATION_SCHEMES:
            raise ContractViolation(f"unknown exploration scheme {self.exploration!r}")
        if self.baseline_boost < 0 or self.ridge_lambda < 0:
            raise ContractViolation("baseline_boost and ridge_lambda must be >= 0")

    @property
    def baseline_index(self) -> int:
        return self.multipliers.index(1.0)

    @property
    def dim(self) -> int:
        return feature_dim(self.H)

    def rho_at(self, k: int) -> float:
        """Exploration parameter after ``k`` interventions (``k >= 1``)."""
        if not self.decay:
            return self.rho
        k = max(k, 1)
        if self.exploration == "epsilon_greedy":
            return min(1.0, self.rho / math.sqrt(k))
        return self.rho * math.sqrt(k)


@dataclass(frozen=True)
class TargetSchedule:
    times: tuple[int, ...]
    H: int = 0

    def __post_init__(self):
        times = tuple(int(t) for t in self.times)
        object.__setattr__(self, "times", times)
        problems = schedule_violations(times, self.H)
        if problems:
            raise ContractViolation("; ".join(problems))

    def __contains__(self, t) -> bool:
        return t in self.times

    def __len__(self):
        return len(self.times)


def schedule_violations(times: Sequence[int], H: int) -> list[str]:
    out = []
    if any(t < 0 for t in times):
        out.append("schedule weeks must be >= 0")
    for a, b in zip(times, times[1:]):
        if b <= a:
            out.append(f"schedule not strictly increasing at ({a}, {b})")
        elif b - a < H:
            out.append(f"schedule weeks ({a}, {b}) are {b - a} apart, need >= H={H}")
    return out


# ---------------------------------------------------------------------------
# features and the reward model


def feature_dim(H: int) -> int:
    return N_STATIC + 2 + 2 * H + 1


def features(
    config: ProductConfig, on_hand: int, pipeline_sum: int,
    past_demand: Sequence[int], past_orders: Sequence[int], H: int,
) -> np.ndarray:
    """Context vector at a decision week.

    ``past_demand``/``past_orders`` are in calendar order; the most recent
    ``H`` of each are used, newest first, zero-padded.
    """
    def recent(values):
        vals = list(values)[::-1][:H]
        return vals + [0] * (H - len(vals))

    return np.array(
        [*config.statics, on_hand, pipeline_sum, *recent(past_demand), *recent(past_orders), 1.0],
        dtype=float,
    )


def batch_features(batch, statics: np.ndarray, rows: np.ndarray, t: int, H: int) -> np.ndarray:
    """Feature rows for ``rows`` at week ``t`` of a runner or finished batch.

    ``batch`` is a :class:`BatchRunner` (state at the start of ``t``) or a
    :class:`BatchTrajectory` (state read from the recorded history).
    """
    if isinstance(batch, BatchRunner):
        on_hand = batch.on_hand[rows]
        pipe = batch.pipeline[rows].sum(axis=1)
        demand = batch.demand
        orders = batch._hist["orders"]
    else:
        on_hand = batch.on_hand_start[rows, t]
        pipe = batch.pipeline_start[rows, t].sum(axis=1)
        demand = batch.demand
        orders = batch.orders
    n = len(rows)
    X = np.zeros((n, feature_dim(H)))
    X[:, :N_STATIC] = statics[rows]
    X[:, N_STATIC] = on_hand
    X[:, N_STATIC + 1] = pipe
    k = min(H, t)
    if k:
        recent = t - 1 - np.arange(k)
        X[:, N_STATIC + 2:N_STATIC + 2 + k] = demand[np.ix_(rows, recent)]
        X[:, N_STATIC + 2 + H:N_STATIC + 2 + H + k] = orders[np.ix_(rows, recent)]
    X[:, -1] = 1.0
    return X


@dataclass(frozen=True)
class ThetaModel:
    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray

    @classmethod
    def from_vector(cls, w: np.ndarray) -> "ThetaModel":
        w = np.asarray(w, dtype=float)
        if w.size % 3:
            raise ContractViolation("parameter vector length must be divisible by 3")
        d = w.size // 3
        return cls(w[:d].copy(), w[d:2 * d].copy(), w[2 * d:].copy())

    @classmethod
    def zeros(cls, d: int) -> "ThetaModel":
        return cls.from_vector(np.zeros(3 * d))

    @property
    def dim(self) -> int:
        return self.theta1.size

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta1, self.theta2, self.theta3])


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    a: float
    y: float


def design(X: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Stacked feature map ``[x, (a-1) x, (a-1)^2 x]`` row by row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    da = (np.asarray(a, dtype=float) - 1.0).reshape(-1, 1)
    return np.hstack([X, da * X, da ** 2 * X])


def predict(model: ThetaModel, x: np.ndarray, a: float) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise ContractViolation(f"feature dimension {x.shape} does not match model dimension {model.dim}")
    da = a - 1.0
    return float(model.theta1 @ x + da * (model.theta2 @ x) + da * da * (model.theta3 @ x))


def predict_all(model: ThetaModel, X: np.ndarray, multipliers: Sequence[float]) -> np.ndarray:
    """Predictions of shape ``(n, len(multipliers))``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dim:
        raise ContractViolation(f"feature dimension {X.shape[1]} does not match model dimension {model.dim}")
    base, lin, quad = X @ model.theta1, X @ model.theta2, X @ model.theta3
    da = np.asarray(multipliers, dtype=float) - 1.0
    return base[:, None] + da[None, :] * lin[:, None] + (da ** 2)[None, :] * quad[:, None]


def _solve_ridge(gram: np.ndarray, rhs: np.ndarray, lam: float) -> np.ndarray:
    if lam > 0:
        return linalg.solve(gram + lam * np.eye(len(gram)), rhs, assume_a="pos")
    return linalg.lstsq(gram, rhs)[0]


def fit_arrays(X: np.ndarray, a: np.ndarray, y: np.ndarray, ridge_lambda: float = 0.0) -> ThetaModel:
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ContractViolation("cannot fit on empty history")
    if not np.all(np.isfinite(y)):
        raise ContractViolation("labels must be finite")
    phi = design(X, a)
    if ridge_lambda == 0:
        # minimum-norm least squares, exact even when phi is rank deficient
        return ThetaModel.from_vector(linalg.lstsq(phi, y)[0])
    return ThetaModel.from_vector(_solve_ridge(phi.T @ phi, phi.T @ y, ridge_lambda))


def fit_model(history: Sequence[LabeledExample], ridge_lambda: float = 0.0) -> ThetaModel:
    """Regularised least squares over the stacked feature map."""
    if not history:
        raise ContractViolation("cannot fit on empty history")
    X = np.stack([ex.x for ex in history])
    a = np.array([ex.a for ex in history], dtype=float)
    y = np.array([ex.y for ex in history], dtype=float)
    return fit_arrays(X, a, y, ridge_lambda)


class RidgeAccumulator:
    """Running Gram matrix of the stacked design.

    Solving from the accumulated normal equations gives the same minimiser as
    refitting on the full history, without keeping every row around.
    """

    def __init__(self, d: int):
        self.d = d
        self.gram = np.zeros((3 * d, 3 * d))
        self.rhs = np.zeros(3 * d)
        self.n = 0

    def add(self, X: np.ndarray, a: np.ndarray, y: np.ndarray) -> None:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise ContractViolation("labels must be finite")
        phi = design(X, a)
        self.gram += phi.T @ phi
        self.rhs += phi.T @ y
        self.n += len(y)

    def solve(self, ridge_lambda: float) -> ThetaModel:
        if self.n == 0:
            raise ContractViolation("cannot fit on empty history")
        return ThetaModel.from_vector(_solve_ridge(self.gram, self.rhs, ridge_lambda))


def build_label(trajectory: Trajectory, tau: int, H: int, gamma: float) -> float:
    """Window-discounted reward ``sum_{k=0..H} gamma**k * r[tau+k]``."""
    if tau < 0 or tau + H >= trajectory.horizon:
        raise ContractViolation(f"label window [{tau}, {tau + H}] exceeds horizon {trajectory.horizon}")
    r = trajectory.rewards[tau:tau + H + 1]
    return float(np.dot(gamma ** np.arange(H + 1), r))


def batch_labels(rewards: np.ndarray, gammas: np.ndarray, rows: np.ndarray, taus: np.ndarray, H: int) -> np.ndarray:
    idx = taus[:, None] + np.arange(H + 1)[None, :]
    disc = gammas[rows][:, None] ** np.arange(H + 1)[None, :]
    return (rewards[rows[:, None], idx] * disc).sum(axis=1)


# ---------------------------------------------------------------------------
# exploration


def action_probabilities(
    predictions: Sequence[float],
    exploration: str,
    rho: float,
    baseline_boost: float = 0.0,
    baseline_index: int = 1,
) -> np.ndarray:
    """Exploration distribution over actions for one context."""
    return batch_action_probabilities(
        np.asarray(predictions, dtype=float)[None, :], exploration, rho, baseline_boost, baseline_index
    )[0]


def boost_baseline(predictions: np.ndarray, baseline_boost: float, baseline_index: int) -> np.ndarray:
    """Scale the baseline prediction so the boost always favours it."""
    out = np.array(predictions, dtype=float, copy=True)
    col = out[:, baseline_index]
    factor = 1.0 + baseline_boost
    out[:, baseline_index] = np.where(col > 0, col * factor, col / factor)
    return out


def greedy_index(boosted: np.ndarray, baseline_index: int) -> np.ndarray:
    """Row-wise argmax; ties go to the baseline, then to the lowest index."""
    best = boosted.max(axis=1, keepdims=True)
    at_max = boosted == best
    first = at_max.argmax(axis=1)
    return np.where(at_max[:, baseline_index], baseline_index, first)


def batch_action_probabilities(
    predictions: np.ndarray, exploration: str, rho: float,
    baseline_boost: float = 0.0, baseline_index: int = 1,
) -> np.ndarray:
    preds = np.atleast_2d(np.asarray(predictions, dtype=float))
    if not np.all(np.isfinite(preds)):
        raise ContractViolation("predictions must be finite")
    n, K = preds.shape
    if exploration == "epsilon_greedy":
        if not 0 <= rho <= 1:
            raise ContractViolation("epsilon-greedy rho must be in [0, 1]")
    elif exploration == "inverse_gap_weighting":
        if not rho > 0:
            raise ContractViolation("inverse gap weighting rho must be > 0")
    else:
        raise ContractViolation(f"unknown exploration scheme {exploration!r}")

    boosted = boost_baseline(preds, baseline_boost, baseline_index)
    best = greedy_index(boosted, baseline_index)
    rows = np.arange(n)
    if exploration == "epsilon_greedy":
        p = np.full((n, K), rho / K)
    else:
        gaps = boosted[rows, best][:, None] - boosted
        p = 1.0 / (K + rho * gaps)
    p[rows, best] = 0.0
    p[rows, best] = 1.0 - p.sum(axis=1)
    return p


def sample_actions(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of one action index per row."""
    cdf = np.cumsum(p, axis=1)
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


# ---------------------------------------------------------------------------
# the bandit run


@dataclass(frozen=True)
class Snapshot:
    week: int
    model: ThetaModel
    product_id: int | None = None  # None for the pooled model
    n_examples: int = 0


@dataclass(frozen=True)
class LogEntry:
    product_id: int
    week: int
    baseline_order: int
    multiplier: float
    probabilities: tuple[float, ...]
    predictions: tuple[float, ...]
    rho: float


@dataclass
class BanditRun:
    batch: BatchTrajectory
    snapshots: list[Snapshot]
    log: list[LogEntry]
    examples: list[tuple[int, int, LabeledExample]] = field(default_factory=list)  # (product, tau, example)
    interventions: int = 0

    def trajectory(self, i: int) -> Trajectory:
        return self.batch.trajectory(i)


def _as_schedules(schedule, n: int) -> list[TargetSchedule]:
    if isinstance(schedule, TargetSchedule):
        return [schedule] * n
    schedules = list(schedule)
    if len(schedules) != n:
        raise ContractViolation("need one schedule per product")
    return schedules


def run_bandit(
    baseline,
    schedule: TargetSchedule | Sequence[TargetSchedule],
    bandit_config: BanditConfig,
    product_configs: Sequence[ProductConfig],
    seed: int,
    product_ids: Sequence[int] | None = None,
    warm_start: RidgeAccumulator | dict[int, RidgeAccumulator] | None = None,
    prior_interventions: int = 0,
) -> BanditRun:
    """Play the baseline with bandit overrides on scheduled weeks.

    ``baseline`` is one policy or one per product. ``schedule`` is shared or
    given per product. Demand/lead-time draws come from ``seed``'s substreams
    and action sampling from its ``bandit`` substream, so the run is a pure
    function of its arguments. A ``warm_start`` accumulator (pooled) or dict
    of accumulators (per product) is copied, not mutated.
    """
    cfg = bandit_config
    configs = list(product_configs)
    n = len(configs)
    if n == 0:
        raise ContractViolation("need at least one product")
    pids = list(range(n)) if product_ids is None else list(product_ids)
    policies = list(baseline) if isinstance(baseline, (list, tuple)) else [baseline] * n
    schedules = _as_schedules(schedule, n)
    for s in schedules:
        problems = schedule_violations(s.times, cfg.H)
        if problems:
            raise ContractViolation("; ".join(problems))

    runner = BatchRunner(policies, configs, [seed] * n, pids)
    T = runner.T
    statics = np.array([c.statics for c in configs], dtype=float)
    gammas = np.array([c.gamma for c in configs])
    u = np.stack([rng.uniforms(seed, p, "bandit", T) for p in pids])
    K = len(cfg.multipliers)
    mult = np.asarray(cfg.multipliers)
    d = cfg.dim

    def copy_acc(acc):
        new = RidgeAccumulator(d)
        if acc is not None:
            new.gram[:] = acc.gram
            new.rhs[:] = acc.rhs
            new.n = acc.n
        return new

    if cfg.pooled:
        pooled = copy_acc(warm_start if isinstance(warm_start, RidgeAccumulator) else None)
        accs = None
    else:
        ws = warm_start if isinstance(warm_start, dict) else {}
        accs = {i: copy_acc(ws.get(pids[i])) for i in range(n)}

    targets_at: dict[int, list[int]] = {}
    for i, s in enumerate(schedules):
        for t in s.times:
            if t < T:
                targets_at.setdefault(t, []).append(i)

    pending: list[tuple[int, int, np.ndarray, float]] = []
    run = BanditRun(batch=None, snapshots=[], log=[])  # type: ignore[arg-type]
    k = prior_interventions
    zero = ThetaModel.zeros(d)

    for t in range(T):
        # labels whose window [tau, tau+H] has fully elapsed
        ready = [p for p in pending if p[1] + cfg.H <= t - 1]
        if ready:
            pending = [p for p in pending if p[1] + cfg.H > t - 1]
            rows = np.array([p[0] for p in ready])
            taus = np.array([p[1] for p in ready])
            ys = batch_labels(runner.rewards, gammas, rows, taus, cfg.H)
            Xr = np.stack([p[2] for p in ready])
            ar = np.array([p[3] for p in ready])
            if cfg.pooled:
                pooled.add(Xr, ar, ys)
            else:
                for j, i in enumerate(rows):
                    accs[i].add(Xr[j:j + 1], ar[j:j + 1], ys[j:j + 1])
            for (i, tau, x, a), y in zip(ready, ys):
                run.examples.append((pids[i], tau, LabeledExample(x, a, float(y))))

        rows_t = targets_at.get(t)
        if not rows_t:
            runner.advance()
            continue
        rows = np.array(rows_t)
        X = batch_features(runner, statics, rows, t, cfg.H)
        preds = np.zeros((len(rows), K))
        if cfg.pooled:
            model = pooled.solve(cfg.ridge_lambda) if pooled.n else zero
            if pooled.n:
                run.snapshots.append(Snapshot(t, model, None, pooled.n))
            preds = predict_all(model, X, mult)
        else:
            for j, i in enumerate(rows):
                acc = accs[i]
                model = acc.solve(cfg.ridge_lambda) if acc.n else zero
                if acc.n:
                    run.snapshots.append(Snapshot(t, model, pids[i], acc.n))
                preds[j] = predict_all(model, X[j:j + 1], mult)[0]

        base_orders = runner.policy_orders()[rows]
        probs = np.zeros((len(rows), K))
        rhos = np.zeros(len(rows))
        for j in range(len(rows)):
            k += 1
            rhos[j] = cfg.rho_at(k)
            probs[j] = batch_action_probabilities(
                preds[j:j + 1], cfg.exploration, rhos[j], cfg.baseline_boost, cfg.baseline_index)[0]
        choice = sample_actions(probs, u[rows, t])
        m_t = np.ones(n)
        m_t[rows] = mult[choice]
        for j, i in enumerate(rows):
            run.log.append(LogEntry(
                pids[i], t, int(base_orders[j]), float(mult[choice[j]]),
                tuple(float(v) for v in probs[j]), tuple(float(v) for v in preds[j]), float(rhos[j]),
            ))
            if t + cfg.H < T:
                pending.append((i, t, X[j], float(mult[choice[j]])))
        runner.advance(m_t)

    run.batch = runner.result()
    run.interventions = k
    return run


# ---------------------------------------------------------------------------
# exports


def action_columns(multipliers: Sequence[float]) -> list[str]:
    if tuple(multipliers) == (0.8, 1.0, 1.2):
        return ["down", "same", "up"]
    return [f"m{m:g}" for m in multipliers]


def log_to_csv(log: Sequence[LogEntry], multipliers: Sequence[float], fh=None) -> str | None:
    names = action_columns(multipliers)
    out = io.StringIO() if fh is None else fh
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["product_id", "week", "baseline_order", "multiplier_sampled"]
                    + [f"p_{c}" for c in names] + [f"pred_{c}" for c in names])
    for e in log:
        writer.writerow([e.product_id, e.week, e.baseline_order, repr(e.multiplier)]
                        + [repr(p) for p in e.probabilities] + [repr(p) for p in e.predictions])
    return out.getvalue() if fh is None else None


def snapshots_to_text(snapshots: Sequence[Snapshot]) -> str:
    """One line per snapshot: ``week product n_examples`` then ``3d`` parameters."""
    d = snapshots[0].model.dim if snapshots else 0
    lines = [f"# dim {d} count {len(snapshots)}"]
    for s in snapshots:
        pid = -1 if s.product_id is None else s.product_id
        lines.append(" ".join([str(s.week), str(pid), str(s.n_examples)] + [repr(float(v)) for v in s.model.vector]))
    return "\n".join(lines) + "\n"


def snapshots_from_text(text: str) -> list[Snapshot]:
    lines = text.strip().splitlines()
    header = lines[0].split()
    if header[:2] != ["#", "dim"]:
        raise ValueError("missing snapshot header")
    d = int(header[2])
    out = []
    for line in lines[1:]:
        parts = line.split()
        week, pid, n = int(parts[0]), int(parts[1]), int(parts[2])
        vec = np.array([float(v) for v in parts[3:]])
        if vec.size != 3 * d:
            raise ValueError(f"snapshot has {vec.size} parameters, header says {3 * d}")
        out.append(Snapshot(week, ThetaModel.from_vector(vec), None if pid < 0 else pid, n))
    return out
