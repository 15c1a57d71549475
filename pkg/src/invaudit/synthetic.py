"""Realizable synthetic contexts for checking the learner in isolation.

Contexts are Gaussian with a trailing constant feature, and rewards follow
the bandit's own quadratic-in-multiplier model under a planted parameter, so
the model class contains the truth.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from invaudit.bandit import (
    BanditConfig, RidgeAccumulator, ThetaModel, batch_action_probabilities, greedy_index, predict_all,
    sample_actions,
)


@dataclass
class RealizableEnvironment:
    theta: ThetaModel
    multipliers: tuple[float, ...] = (0.8, 1.0, 1.2)
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    @classmethod
    def planted(cls, d: int, seed: int = 0, noise_sigma: float = 0.0, multipliers=(0.8, 1.0, 1.2)):
        """Random planted parameter; the curvature term is kept negative so the best arm varies."""
        g = np.random.default_rng([seed, 1])
        t1 = g.normal(size=d)
        t2 = g.normal(size=d) * 5.0
        t3 = g.normal(size=d) * 5.0
        t3[-1] = -5.0 * d
        return cls(ThetaModel(t1, t2, t3), tuple(multipliers), noise_sigma, seed)

    @property
    def dim(self) -> int:
        return self.theta.dim

    def contexts(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        g = rng if rng is not None else self._rng
        X = g.normal(size=(n, self.dim))
        X[:, -1] = 1.0
        return X

    def mean_rewards(self, X: np.ndarray) -> np.ndarray:
        return predict_all(self.theta, X, self.multipliers)

    def best_actions(self, X: np.ndarray) -> np.ndarray:
        return greedy_index(self.mean_rewards(X), list(self.multipliers).index(1.0))

    def reward(self, x: np.ndarray, j: int) -> float:
        mean = self.mean_rewards(x[None, :])[0, j]
        return float(mean + self.noise_sigma * self._rng.normal()) if self.noise_sigma else float(mean)


def agreement(model: ThetaModel, env: RealizableEnvironment, X: np.ndarray) -> float:
    """Share of contexts where the fitted argmax equals the true argmax."""
    base = list(env.multipliers).index(1.0)
    fitted = greedy_index(predict_all(model, X, env.multipliers), base)
    return float(np.mean(fitted == env.best_actions(X)))


def online_agreement_curve(
    env: RealizableEnvironment, bandit: BanditConfig, checkpoints: Sequence[int],
    n_heldout: int = 200, seed: int = 0,
) -> dict[int, float]:
    """Run the explore/refit loop and report held-out argmax agreement at each checkpoint."""
    g = np.random.default_rng([seed, 2])
    heldout = env.contexts(n_heldout, np.random.default_rng([seed, 3]))
    mult = np.asarray(env.multipliers)
    acc = RidgeAccumulator(env.dim)
    model = ThetaModel.zeros(env.dim)
    out = {}
    for k in range(1, max(checkpoints) + 1):
        x = env.contexts(1, g)[0]
        preds = predict_all(model, x[None, :], mult)
        p = batch_action_probabilities(preds, bandit.exploration, bandit.rho_at(k), bandit.baseline_boost,
                                       bandit.baseline_index)
        j = int(sample_actions(p, g.random(1))[0])
        acc.add(x[None, :], mult[j:j + 1], [env.reward(x, j)])
        if acc.n >= 3 * env.dim:
            model = acc.solve(bandit.ridge_lambda)
        if k in checkpoints:
            out[k] = agreement(model, env, heldout)
    return out
