"""Baseline replenishment policies.

All policies here are order-up-to rules: each week they compute a target
level and order ``max(0, level - inventory_position)``. A policy is fully
described by its per-week level table and an order scale, which is what the
vectorised simulator consumes.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

from invaudit.errors import ContractViolation
from invaudit.sim_core import ProductConfig, SimState, round_half_up, simulate_batch

Q_MIN, Q_MAX = 0.5, 0.999


def default_service_quantile(config: ProductConfig) -> float:
    """Critical fractile with holding charged over the expected lead time."""
    under = config.price - config.unit_cost + config.lost_sale_penalty
    over = config.holding_cost * config.vlt_model.mean
    q = under / (under + over)
    return min(max(q, Q_MIN), Q_MAX)


@lru_cache(maxsize=16384)
def newsvendor_levels(config: ProductConfig, q: float | None = None) -> np.ndarray:
    q = default_service_quantile(config) if q is None else q
    periods = config.vlt_model.mean + 1.0
    rates = config.demand_model.rates(config.horizon_T)
    levels = config.demand_model.quantile(np.full(len(rates), q), rates, periods)
    levels.setflags(write=False)
    return levels


def newsvendor_action(state: SimState, config: ProductConfig, q: float | None = None) -> int:
    """Order up to the ``q``-quantile of demand over ``E[VLT] + 1`` weeks."""
    if q is not None and not 0 < q < 1:
        raise ContractViolation("service quantile must be in (0, 1)")
    level = int(newsvendor_levels(config, q)[state.t])
    return max(0, level - state.inventory_position)


def scaled_action(inner_action: int, factor: float) -> int:
    if factor <= 0:
        raise ContractViolation("scale factor must be > 0")
    return round_half_up(inner_action * factor)


@dataclass(frozen=True)
class Newsvendor:
    q: float | None = None

    def __post_init__(self):
        if self.q is not None and not 0 < self.q < 1:
            raise ContractViolation("service quantile must be in (0, 1)")

    @property
    def name(self) -> str:
        return "newsvendor" if self.q is None else f"newsvendor(q={self.q:g})"

    def levels(self, config: ProductConfig) -> np.ndarray:
        return newsvendor_levels(config, self.q)

    order_scale = 1.0

    def action(self, state: SimState, config: ProductConfig) -> int:
        return newsvendor_action(state, config, self.q)


@dataclass(frozen=True)
class BaseStock:
    S: int

    def __post_init__(self):
        if self.S < 0:
            raise ContractViolation("base-stock level must be >= 0")

    @property
    def name(self) -> str:
        return f"base_stock(S={self.S})"

    def levels(self, config: ProductConfig) -> np.ndarray:
        return np.full(config.horizon_T, self.S, dtype=np.int64)

    order_scale = 1.0

    def action(self, state: SimState, config: ProductConfig) -> int:
        return max(0, self.S - state.inventory_position)


@dataclass(frozen=True)
class Scaled:
    """Scale an inner policy by ``factor``.

    ``mode="target"`` multiplies the inner order-up-to level (the total
    inventory position aimed for); ``mode="order"`` multiplies the inner
    order quantity. Both round half-up.
    """

    inner: "Policy"
    factor: float
    mode: str = "target"

    def __post_init__(self):
        if self.factor <= 0:
            raise ContractViolation("scale factor must be > 0")
        if self.mode not in ("target", "order"):
            raise ContractViolation(f"unknown scaling mode {self.mode!r}")

    @property
    def name(self) -> str:
        return f"{self.inner.name}*{self.factor:g}" + ("" if self.mode == "target" else "[order]")

    def levels(self, config: ProductConfig) -> np.ndarray:
        inner = self.inner.levels(config)
        if self.mode == "order":
            return inner
        return round_half_up(inner * self.factor)

    @property
    def order_scale(self) -> float:
        inner = self.inner.order_scale
        return inner * self.factor if self.mode == "order" else inner

    def action(self, state: SimState, config: ProductConfig) -> int:
        level = int(self.levels(config)[state.t])
        return round_half_up(self.order_scale * max(0, level - state.inventory_position))


Policy = Union[Newsvendor, BaseStock, Scaled]


def policy_tables(policies: Sequence[Policy], configs: Sequence[ProductConfig]):
    """Stack per-row level tables ``(N, T)`` and order scales ``(N,)``."""
    levels = np.stack([p.levels(c) for p, c in zip(policies, configs)])
    scale = np.array([p.order_scale for p in policies], dtype=float)
    return levels, scale


def evaluate_grid(config: ProductConfig, grid: Sequence[int], seeds: Sequence[int], product_id: int = 0) -> np.ndarray:
    """Mean total discounted reward of ``BaseStock(S)`` for each ``S`` in ``grid``."""
    grid = list(grid)
    n = len(seeds)
    pols = [BaseStock(int(S)) for S in grid for _ in range(n)]
    batch = simulate_batch(pols, [config] * len(pols), list(seeds) * len(grid), [product_id] * len(pols))
    return batch.total_discounted_reward.reshape(len(grid), n).mean(axis=1)


def tune_base_stock(
    config: ProductConfig,
    candidate_grid: Sequence[int],
    n_seeds: int = 8,
    seed: int = 0,
    product_id: int = 0,
) -> BaseStock:
    """Pick the base-stock level with the best mean simulated reward.

    Seeds ``seed, seed+1, ...`` are shared across all candidates, and ties go to
    the smaller level. This is the simulation-tuned stand-in for a learned
    policy.
    """
    grid = sorted(set(int(S) for S in candidate_grid))
    if not grid:
        raise ContractViolation("candidate grid is empty")
    if n_seeds < 1:
        raise ContractViolation("n_seeds must be >= 1")
    means = evaluate_grid(config, grid, [seed + i for i in range(n_seeds)], product_id)
    return BaseStock(grid[int(np.argmax(means))])


def default_base_stock_grid(config: ProductConfig) -> list[int]:
    """Candidate levels from zero to twice the largest newsvendor target."""
    top = int(newsvendor_levels(config).max())
    return list(range(0, 2 * top + 2))
