"""Periodic-review lost-sales inventory simulator.

Each period runs in a fixed order:

1. arrivals: ``pipeline[0]`` moves to on-hand and the pipeline shifts left;
2. demand is drawn at the week's rate;
3. sales are ``min(demand, on_hand)``, the remainder is lost;
4. the order is placed with a freshly drawn lead time ``l`` into ``pipeline[l-1]``;
5. reward is ``price*sales - unit_cost*order - holding_cost*on_hand_end
   - lost_sale_penalty*lost``.

Demand and lead times are exogenous: they are drawn per week from the
``demand`` and ``vlt`` substreams (see :mod:`invaudit.rng`) regardless of the
actions taken, so any two rollouts with the same ``(seed, product_id)`` see
identical randomness.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy import stats

from invaudit import rng
from invaudit.errors import ContractViolation

if TYPE_CHECKING:
    from invaudit.policies import Policy

DEMAND_FAMILIES = ("poisson", "negative_binomial", "deterministic")


def round_half_up(x):
    """Round to the nearest integer, halves away from zero for nonnegative input."""
    if isinstance(x, np.ndarray):
        return np.floor(x + 0.5).astype(np.int64)
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class DemandModel:
    family: str = "poisson"
    base_rate: float = 8.0
    seasonal_amplitude: float = 0.0
    seasonal_period: float = 52.0
    trend: float = 0.0
    # negative binomial shape; variance = mean + mean**2 / dispersion
    dispersion: float = 10.0

    def __post_init__(self):
        if self.family not in DEMAND_FAMILIES:
            raise ContractViolation(f"unknown demand family {self.family!r}")
        if self.base_rate < 0:
            raise ContractViolation("base_rate must be >= 0")
        if not 0 <= self.seasonal_amplitude < 1:
            raise ContractViolation("seasonal_amplitude must be in [0, 1)")
        if self.seasonal_period <= 0:
            raise ContractViolation("seasonal_period must be > 0")
        if self.dispersion <= 0:
            raise ContractViolation("dispersion must be > 0")

    def rates(self, n: int) -> np.ndarray:
        t = np.arange(n, dtype=float)
        seasonal = 1.0 + self.seasonal_amplitude * np.sin(2 * np.pi * t / self.seasonal_period)
        return np.maximum(0.01, self.base_rate * seasonal + self.trend * t)

    def rate(self, t: int) -> float:
        seasonal = 1.0 + self.seasonal_amplitude * math.sin(2 * math.pi * t / self.seasonal_period)
        return max(0.01, self.base_rate * seasonal + self.trend * t)

    def quantile(self, u, rate, periods=1.0):
        """Inverse CDF of demand aggregated over ``periods`` weeks at ``rate``."""
        mean = np.asarray(rate, dtype=float) * periods
        if self.family == "poisson":
            out = stats.poisson.ppf(u, mean)
        elif self.family == "negative_binomial":
            n = self.dispersion * periods
            out = stats.nbinom.ppf(u, n, n / (n + mean))
        else:
            out = np.ceil(np.floor(np.asarray(rate, dtype=float) + 0.5) * periods - 1e-9)
            out = np.broadcast_to(out, np.broadcast(u, mean).shape)
        return np.asarray(out, dtype=np.int64)


@dataclass(frozen=True)
class VltModel:
    pmf: tuple[float, ...] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "pmf", tuple(float(p) for p in self.pmf))
        if not self.pmf:
            raise ContractViolation("VLT pmf must be nonempty")
        if any(p < 0 for p in self.pmf) or abs(sum(self.pmf) - 1.0) > 1e-9:
            raise ContractViolation("VLT pmf must be nonnegative and sum to 1")

    @classmethod
    def deterministic(cls, lead_time: int) -> "VltModel":
        return cls(tuple(1.0 if k == lead_time else 0.0 for k in range(1, lead_time + 1)))

    @property
    def mean(self) -> float:
        return sum((k + 1) * p for k, p in enumerate(self.pmf))

    @property
    def max_support(self) -> int:
        return max(k + 1 for k, p in enumerate(self.pmf) if p > 0)

    def sample(self, u: np.ndarray) -> np.ndarray:
        cdf = np.cumsum(self.pmf)
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, u, side="left")
        return np.minimum(idx, len(self.pmf) - 1).astype(np.int64) + 1


@dataclass(frozen=True)
class ProductConfig:
    price: float = 10.0
    unit_cost: float = 4.0
    holding_cost: float = 0.5
    lost_sale_penalty: float = 2.0
    gamma: float = 0.999
    demand_model: DemandModel = field(default_factory=DemandModel)
    vlt_model: VltModel = field(default_factory=VltModel)
    L_max: int = 0
    horizon_T: int = 52
    initial_on_hand: int = 0

    def __post_init__(self):
        if self.L_max == 0:
            object.__setattr__(self, "L_max", len(self.vlt_model.pmf))
        if not self.price > self.unit_cost > 0:
            raise ContractViolation("economics must satisfy price > unit_cost > 0")
        if self.holding_cost < 0 or self.lost_sale_penalty < 0:
            raise ContractViolation("holding_cost and lost_sale_penalty must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ContractViolation("gamma must be in (0, 1]")
        if self.vlt_model.max_support > self.L_max:
            raise ContractViolation("VLT support exceeds L_max")
        if self.horizon_T < 1:
            raise ContractViolation("horizon_T must be >= 1")
        if self.initial_on_hand < 0:
            raise ContractViolation("initial_on_hand must be >= 0")

    @property
    def statics(self) -> tuple[float, float, float, float]:
        return (self.price, self.unit_cost, self.holding_cost, self.lost_sale_penalty)

    def initial_state(self) -> "SimState":
        return SimState(self.initial_on_hand, (0,) * self.L_max, 0)


@dataclass(frozen=True)
class SimState:
    on_hand: int
    pipeline: tuple[int, ...]
    t: int = 0

    @property
    def inventory_position(self) -> int:
        return self.on_hand + sum(self.pipeline)


@dataclass(frozen=True)
class PeriodRecord:
    t: int
    on_hand_start: int
    arrivals: int
    demand: int
    sales: int
    lost_sales: int
    order: int
    lead_time: int
    on_hand_end: int
    reward: float


@dataclass(frozen=True)
class Streams:
    """Per-week exogenous draws for one product: demand units and lead times."""

    demand: np.ndarray
    lead_time: np.ndarray

    @classmethod
    def from_seed(cls, config: ProductConfig, seed: int, product_id: int = 0) -> "Streams":
        return _cached_streams(config, int(seed), int(product_id))

    @classmethod
    def fixed(cls, demand: Sequence[int], lead_time: Sequence[int] | int) -> "Streams":
        demand = np.asarray(demand, dtype=np.int64)
        if np.isscalar(lead_time):
            lead_time = np.full(len(demand), lead_time, dtype=np.int64)
        return cls(demand, np.asarray(lead_time, dtype=np.int64))


@lru_cache(maxsize=16384)
def _cached_streams(config: ProductConfig, seed: int, product_id: int) -> Streams:
    T = config.horizon_T
    rates = config.demand_model.rates(T)
    demand = config.demand_model.quantile(rng.uniforms(seed, product_id, "demand", T), rates)
    lead = config.vlt_model.sample(rng.uniforms(seed, product_id, "vlt", T))
    demand.setflags(write=False)
    lead.setflags(write=False)
    return Streams(demand, lead)


def step(
    state: SimState, order_qty: int, config: ProductConfig, streams: Streams
) -> tuple[SimState, PeriodRecord]:
    if order_qty < 0:
        raise ContractViolation(f"negative order quantity {order_qty}")
    if len(state.pipeline) != config.L_max:
        raise ContractViolation("pipeline length must equal L_max")
    if state.on_hand < 0 or min(state.pipeline) < 0:
        raise ContractViolation("state has negative inventory")
    order_qty = int(order_qty)
    t = state.t

    arrivals = state.pipeline[0]
    pipeline = list(state.pipeline[1:]) + [0]
    on_hand = state.on_hand + arrivals

    demand = int(streams.demand[t])
    sales = min(demand, on_hand)
    on_hand -= sales
    lost = demand - sales

    lead = int(streams.lead_time[t])
    pipeline[lead - 1] += order_qty

    reward = (
        config.price * sales
        - config.unit_cost * order_qty
        - config.holding_cost * on_hand
        - config.lost_sale_penalty * lost
    )
    record = PeriodRecord(t, state.on_hand, arrivals, demand, sales, lost, order_qty, lead, on_hand, reward)
    return SimState(on_hand, tuple(pipeline), t + 1), record


@dataclass
class Trajectory:
    """Per-period arrays for one simulated product; index ``t`` is the period."""

    on_hand_start: np.ndarray
    pipeline_start: np.ndarray  # (T, L_max)
    arrivals: np.ndarray
    demand: np.ndarray
    sales: np.ndarray
    lost_sales: np.ndarray
    orders: np.ndarray
    lead_times: np.ndarray
    on_hand_end: np.ndarray
    rewards: np.ndarray
    gamma: float

    @property
    def horizon(self) -> int:
        return len(self.rewards)

    @property
    def total_discounted_reward(self) -> float:
        return math.fsum(self.gamma ** np.arange(self.horizon) * self.rewards)

    def state(self, t: int) -> SimState:
        return SimState(int(self.on_hand_start[t]), tuple(int(x) for x in self.pipeline_start[t]), t)

    def states(self) -> list[SimState]:
        return [self.state(t) for t in range(self.horizon)]

    def identical_to(self, other: "Trajectory") -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("on_hand_start", "pipeline_start", "demand", "orders", "lead_times", "rewards")
        )

    @classmethod
    def from_records(cls, states: list[SimState], records: list[PeriodRecord], gamma: float) -> "Trajectory":
        def col(name, dtype=np.int64):
            return np.array([getattr(r, name) for r in records], dtype=dtype)

        return cls(
            on_hand_start=np.array([s.on_hand for s in states], dtype=np.int64),
            pipeline_start=np.array([s.pipeline for s in states], dtype=np.int64).reshape(len(states), -1),
            arrivals=col("arrivals"),
            demand=col("demand"),
            sales=col("sales"),
            lost_sales=col("lost_sales"),
            orders=col("order"),
            lead_times=col("lead_time"),
            on_hand_end=col("on_hand_end"),
            rewards=col("reward", float),
            gamma=gamma,
        )

    def to_csv(self, fh=None) -> str | None:
        """Write one row per period; returns the text when ``fh`` is None."""
        out = io.StringIO() if fh is None else fh
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["t", "on_hand_start", "arrivals", "demand", "sales", "lost_sales", "order", "reward"])
        for t in range(self.horizon):
            writer.writerow([
                t, self.on_hand_start[t], self.arrivals[t], self.demand[t], self.sales[t],
                self.lost_sales[t], self.orders[t], repr(float(self.rewards[t])),
            ])
        return out.getvalue() if fh is None else None


def simulate(
    policy: "Policy",
    config: ProductConfig,
    seed: int,
    product_id: int = 0,
    multipliers: dict[int, float] | None = None,
    streams: Streams | None = None,
) -> Trajectory:
    """Roll ``policy`` forward for ``config.horizon_T`` periods.

    ``multipliers`` maps a week to a factor applied to the policy's order that
    week (rounded half-up); all other weeks play the policy unchanged.
    """
    if streams is None:
        streams = Streams.from_seed(config, seed, product_id)
    multipliers = multipliers or {}
    state = config.initial_state()
    states, records = [], []
    for t in range(config.horizon_T):
        order = policy.action(state, config)
        if t in multipliers:
            order = scale_order(order, multipliers[t])
        states.append(state)
        state, rec = step(state, order, config, streams)
        records.append(rec)
    return Trajectory.from_records(states, records, config.gamma)


def scale_order(order: int, multiplier: float) -> int:
    if multiplier <= 0:
        raise ContractViolation("multiplier must be > 0")
    return round_half_up(order * multiplier)


def counterfactual_pair(
    policy: "Policy",
    config: ProductConfig,
    seed: int,
    deviation: tuple[int, float],
    product_id: int = 0,
) -> tuple[Trajectory, Trajectory]:
    """Baseline rollout and a rollout whose week-``t0`` order is scaled by ``m``.

    Both use the same demand and lead-time streams.
    """
    t0, m = deviation
    if not 0 <= t0 < config.horizon_T:
        raise ContractViolation(f"deviation week {t0} outside horizon")
    if m <= 0:
        raise ContractViolation("multiplier must be > 0")
    streams = Streams.from_seed(config, seed, product_id)
    base = simulate(policy, config, seed, product_id, streams=streams)
    dev = simulate(policy, config, seed, product_id, multipliers={t0: m}, streams=streams)
    return base, dev


# ---------------------------------------------------------------------------
# Vectorised engine: many independent rollouts advanced in lock step.


@dataclass
class BatchTrajectory:
    """Stacked rollouts; every array has a leading rollout axis."""

    on_hand_start: np.ndarray
    pipeline_start: np.ndarray  # (N, T, L)
    arrivals: np.ndarray
    demand: np.ndarray
    sales: np.ndarray
    lost_sales: np.ndarray
    orders: np.ndarray
    base_orders: np.ndarray  # policy order before any multiplier
    lead_times: np.ndarray
    on_hand_end: np.ndarray
    rewards: np.ndarray
    gammas: np.ndarray

    def __len__(self):
        return self.rewards.shape[0]

    @property
    def discounts(self) -> np.ndarray:
        T = self.rewards.shape[1]
        return self.gammas[:, None] ** np.arange(T)[None, :]

    @property
    def total_discounted_reward(self) -> np.ndarray:
        # correctly rounded per row, so it matches the scalar trajectory exactly
        return np.array([math.fsum(row) for row in self.discounts * self.rewards])

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            self.on_hand_start[i], self.pipeline_start[i], self.arrivals[i], self.demand[i],
            self.sales[i], self.lost_sales[i], self.orders[i], self.lead_times[i],
            self.on_hand_end[i], self.rewards[i], float(self.gammas[i]),
        )


def stack_streams(configs: Sequence[ProductConfig], seeds: Sequence[int], product_ids: Sequence[int]):
    demand = np.stack([Streams.from_seed(c, s, p).demand for c, s, p in zip(configs, seeds, product_ids)])
    lead = np.stack([Streams.from_seed(c, s, p).lead_time for c, s, p in zip(configs, seeds, product_ids)])
    return demand, lead


class BatchRunner:
    """Advance many independent rollouts one week at a time.

    Row ``i`` uses ``policies[i]``, ``configs[i]`` and the streams of
    ``(seeds[i], product_ids[i])``. Callers choose a multiplier per row each
    week, which is what lets the bandit decide actions mid-run.
    """

    def __init__(self, policies, configs, seeds, product_ids):
        from invaudit.policies import policy_tables

        self.configs = list(configs)
        n = len(self.configs)
        T = self.configs[0].horizon_T
        L = self.configs[0].L_max
        if any(c.horizon_T != T for c in self.configs):
            raise ContractViolation("all configs in a batch must share horizon_T")
        if any(c.L_max != L for c in self.configs):
            raise ContractViolation("all configs in a batch must share L_max")
        self.n, self.T, self.L = n, T, L
        self.t = 0
        self.demand, self.lead = stack_streams(self.configs, seeds, product_ids)
        self.levels, self.order_scale = policy_tables(policies, self.configs)
        self.price, self.cost, self.hold, self.pen = (
            np.array(v, dtype=float) for v in zip(*(c.statics for c in self.configs)))
        self.on_hand = np.array([c.initial_on_hand for c in self.configs], dtype=np.int64)
        self.pipeline = np.zeros((n, L), dtype=np.int64)
        self._rows = np.arange(n)
        self._hist = {k: np.zeros((n, T), dtype=np.int64) for k in (
            "on_hand_start", "arrivals", "sales", "lost_sales", "orders", "base_orders", "on_hand_end")}
        self._pipe_hist = np.zeros((n, T, L), dtype=np.int64)
        self.rewards = np.zeros((n, T))

    @property
    def done(self) -> bool:
        return self.t >= self.T

    def policy_orders(self) -> np.ndarray:
        """Orders the policies would place this week in the current states."""
        ip = self.on_hand + self.pipeline.sum(axis=1)
        return round_half_up(self.order_scale * np.maximum(0, self.levels[:, self.t] - ip))

    def advance(self, multipliers: np.ndarray | None = None) -> None:
        t = self.t
        if t >= self.T:
            raise ContractViolation("horizon exhausted")
        h = self._hist
        h["on_hand_start"][:, t] = self.on_hand
        self._pipe_hist[:, t] = self.pipeline
        base = self.policy_orders()
        if multipliers is None:
            order = base
        else:
            if np.any(multipliers <= 0):
                raise ContractViolation("multipliers must be > 0")
            order = np.where(multipliers == 1.0, base, round_half_up(base * multipliers))

        pipeline = self.pipeline
        arrivals = pipeline[:, 0].copy()
        pipeline[:, :-1] = pipeline[:, 1:]
        pipeline[:, -1] = 0
        on_hand = self.on_hand + arrivals
        d = self.demand[:, t]
        sales = np.minimum(d, on_hand)
        on_hand = on_hand - sales
        lost = d - sales
        pipeline[self._rows, self.lead[:, t] - 1] += order
        self.on_hand = on_hand

        self.rewards[:, t] = self.price * sales - self.cost * order - self.hold * on_hand - self.pen * lost
        h["arrivals"][:, t] = arrivals
        h["sales"][:, t] = sales
        h["lost_sales"][:, t] = lost
        h["orders"][:, t] = order
        h["base_orders"][:, t] = base
        h["on_hand_end"][:, t] = on_hand
        self.t += 1

    def result(self) -> BatchTrajectory:
        T = self.t
        return BatchTrajectory(
            pipeline_start=self._pipe_hist[:, :T].copy(),
            demand=self.demand[:, :T].copy(),
            lead_times=self.lead[:, :T].copy(),
            rewards=self.rewards[:, :T].copy(),
            gammas=np.array([c.gamma for c in self.configs]),
            **{k: v[:, :T].copy() for k, v in self._hist.items()},
        )


def simulate_batch(policies, configs, seeds, product_ids, multipliers: np.ndarray | None = None) -> BatchTrajectory:
    """Vectorised equivalent of calling :func:`simulate` once per row.

    ``multipliers`` is an ``(N, T)`` array of order factors; 1.0 plays the policy.
    """
    runner = BatchRunner(policies, configs, seeds, product_ids)
    while not runner.done:
        runner.advance(None if multipliers is None else multipliers[:, runner.t])
    return runner.result()
