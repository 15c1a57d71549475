"""Experiment configuration and orchestration.

A run has two phases per audited policy:

* train: simulate a training horizon in which scheduled weeks play uniformly
  random multipliers, turn each scheduled week into an H-step label and fit
  the warm-start reward model;
* test: on fresh seeds give every product one bandit week (or an explicit
  schedule), run the bandit, and score it against common-random-number
  oracle rollouts.

Everything is derived from ``master_seed``; the machine-readable report is a
pure function of the resolved configuration.
"""
from __future__ import annotations

import copy
import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from invaudit import rng
from invaudit.bandit import (
    BanditConfig, RidgeAccumulator, TargetSchedule, batch_features, batch_labels, log_to_csv,
    run_bandit, schedule_violations, snapshots_to_text, EXPLORATION_SCHEMES,
)
from invaudit.evaluation import (
    AuditReport, best_index, build_report, equilibrium_gap_samples, format_table, joint_oracle,
    reports_to_json, rollout_rewards,
)
from invaudit.policies import BaseStock, Newsvendor, Scaled, default_base_stock_grid, tune_base_stock
from invaudit.sim_core import DEMAND_FAMILIES, DemandModel, ProductConfig, VltModel, simulate_batch

log = logging.getLogger(__name__)

POLICY_KINDS = ("newsvendor", "base_stock", "tuned_base_stock")

DEFAULT_POLICIES = [
    {"name": "newsvendor", "kind": "newsvendor"},
    {"name": "newsvendor/2", "kind": "newsvendor", "scale": 0.5},
    {"name": "newsvendor*2", "kind": "newsvendor", "scale": 2.0},
    {"name": "tuned base-stock", "kind": "tuned_base_stock"},
]

DEFAULTS: dict[str, Any] = {
    "master_seed": None,
    "n_seeds": 20,
    "output_dir": "audit_out",
    "train_horizon": 104,
    "test_horizon": 52,
    "warmup": 8,
    "schedule_mode": "per_product_random_week",
    "schedule": [],
    "training_design": "balanced",
    "products": {
        "generator": {
            "count": 1000,
            "seed": 7,
            "price": [8.0, 12.0],
            "cost_ratio": [0.4, 0.6],
            "holding_ratio": [0.02, 0.08],
            "penalty_ratio": [0.0, 0.3],
            "base_rate": [4.0, 16.0],
            "seasonal_amplitude": [0.0, 0.3],
            "seasonal_period": 52.0,
            "trend": [0.0, 0.0],
            "family": "poisson",
            "dispersion": [5.0, 20.0],
            "L_max": 3,
            "vlt_concentration": 2.0,
            "gamma": 0.999,
        },
    },
    "policies": DEFAULT_POLICIES,
    "bandit": {
        "H": 12,
        "rho": 1.0,
        "exploration": "inverse_gap_weighting",
        "multipliers": [0.8, 1.0, 1.2],
        "baseline_boost": 0.002,
        "ridge_lambda": 0.001,
        "decay": True,
        "pooled": True,
    },
    "equilibrium": {
        "enabled": True,
        "schedule": [12, 26],
        "n_products": 20,
        "n_seeds": 4,
    },
}

POLICY_DEFAULTS = {"q": None, "S": None, "scale": 1.0, "scale_mode": "target", "tune_seeds": 4}

PRODUCT_DEFAULTS = {
    "price": 10.0, "unit_cost": 4.0, "holding_cost": 0.5, "lost_sale_penalty": 2.0, "gamma": 0.999,
    "demand": {"family": "poisson", "base_rate": 8.0, "seasonal_amplitude": 0.0, "seasonal_period": 52.0,
               "trend": 0.0, "dispersion": 10.0},
    "vlt_pmf": [0.0, 1.0], "L_max": None, "initial_on_hand": None,
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class PolicySpec:
    name: str
    kind: str
    q: float | None = None
    S: int | None = None
    scale: float = 1.0
    scale_mode: str = "target"
    tune_seeds: int = 4


@dataclass(frozen=True)
class EquilibriumSpec:
    enabled: bool = True
    schedule: tuple[int, ...] = (12, 26)
    n_products: int = 20
    n_seeds: int = 4


@dataclass
class ExperimentConfig:
    master_seed: int
    products: list[ProductConfig]
    policies: list[PolicySpec]
    bandit: BanditConfig
    n_seeds: int = 10
    output_dir: str = "audit_out"
    train_horizon: int = 104
    test_horizon: int = 52
    warmup: int = 8
    schedule_mode: str = "per_product_random_week"
    schedule: tuple[int, ...] = ()
    training_design: str = "balanced"
    equilibrium: EquilibriumSpec = field(default_factory=EquilibriumSpec)
    resolved: dict = field(default_factory=dict)

    def policy(self, name: str) -> PolicySpec:
        for p in self.policies:
            if p.name == name:
                return p
        raise KeyError(f"no policy named {name!r}; have {[p.name for p in self.policies]}")


# ---------------------------------------------------------------------------
# validation


def _merge(defaults: dict, raw: dict, path: str, errors: list[str]) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in raw.items():
        if key not in defaults:
            errors.append(f"{path}{key}: unknown key")
        else:
            out[key] = value
    return out


def _num(value, path, errors, lo=None, hi=None, integer=False, lo_open=False, hi_open=False):
    ok_type = isinstance(value, int) if integer else isinstance(value, (int, float))
    if isinstance(value, bool) or not ok_type:
        errors.append(f"{path}: expected {'integer' if integer else 'number'}, got {value!r}")
        return None
    if lo is not None and (value <= lo if lo_open else value < lo):
        errors.append(f"{path}: {value!r} out of range (must be {'>' if lo_open else '>='} {lo})")
        return None
    if hi is not None and (value >= hi if hi_open else value > hi):
        errors.append(f"{path}: {value!r} out of range (must be {'<' if hi_open else '<='} {hi})")
        return None
    return value


def _choice(value, options, path, errors):
    if value not in options:
        errors.append(f"{path}: {value!r} is not one of {list(options)}")
    return value


def _range(value, path, errors, lo=None, hi=None, hi_open=False):
    if not (isinstance(value, list) and len(value) == 2):
        errors.append(f"{path}: expected [low, high]")
        return None
    a = _num(value[0], f"{path}[0]", errors, lo, hi, hi_open=hi_open)
    b = _num(value[1], f"{path}[1]", errors, lo, hi, hi_open=hi_open)
    if a is not None and b is not None and a > b:
        errors.append(f"{path}: low {a} exceeds high {b}")
    return value


def _week_list(value, path, errors):
    if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
        errors.append(f"{path}: expected a list of integer weeks")
        return []
    return value


def _check_bandit(raw, errors) -> dict:
    b = _merge(DEFAULTS["bandit"], raw if isinstance(raw, dict) else {}, "bandit.", errors)
    _num(b["H"], "bandit.H", errors, 0, integer=True)
    _num(b["rho"], "bandit.rho", errors, 0)
    _choice(b["exploration"], EXPLORATION_SCHEMES, "bandit.exploration", errors)
    _num(b["baseline_boost"], "bandit.baseline_boost", errors, 0)
    _num(b["ridge_lambda"], "bandit.ridge_lambda", errors, 0)
    for k in ("decay", "pooled"):
        if not isinstance(b[k], bool):
            errors.append(f"bandit.{k}: expected true/false")
    m = b["multipliers"]
    if not isinstance(m, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in m):
        errors.append("bandit.multipliers: expected a list of numbers")
    elif any(v <= 0 for v in m) or 1.0 not in m or any(y <= x for x, y in zip(m, m[1:])):
        errors.append("bandit.multipliers: must be positive, strictly increasing and contain 1.0")
    if (b["exploration"] == "epsilon_greedy" and isinstance(b["rho"], (int, float))
            and not b["decay"] and b["rho"] > 1):
        errors.append("bandit.rho: epsilon-greedy rho must be <= 1 without decay")
    return b


def _check_generator(raw, errors) -> dict:
    p = "products.generator."
    g = _merge(DEFAULTS["products"]["generator"], raw if isinstance(raw, dict) else {}, p, errors)
    _num(g["count"], p + "count", errors, 1, integer=True)
    _num(g["seed"], p + "seed", errors, 0, integer=True)
    _range(g["price"], p + "price", errors, 0)
    _range(g["cost_ratio"], p + "cost_ratio", errors, 0, 1, hi_open=True)
    _range(g["holding_ratio"], p + "holding_ratio", errors, 0)
    _range(g["penalty_ratio"], p + "penalty_ratio", errors, 0)
    _range(g["base_rate"], p + "base_rate", errors, 0)
    _range(g["seasonal_amplitude"], p + "seasonal_amplitude", errors, 0, 1, hi_open=True)
    _num(g["seasonal_period"], p + "seasonal_period", errors, 0, lo_open=True)
    _range(g["trend"], p + "trend", errors)
    _choice(g["family"], DEMAND_FAMILIES, p + "family", errors)
    _range(g["dispersion"], p + "dispersion", errors, 0)
    _num(g["L_max"], p + "L_max", errors, 1, integer=True)
    _num(g["vlt_concentration"], p + "vlt_concentration", errors, 0, lo_open=True)
    _num(g["gamma"], p + "gamma", errors, 0, 1, lo_open=True)
    if isinstance(g["price"], list) and g["price"] and isinstance(g["price"][0], (int, float)) and g["price"][0] <= 0:
        errors.append(p + "price: prices must be > 0")
    return g


def _check_product(raw, path, errors) -> dict:
    d = _merge(PRODUCT_DEFAULTS, raw if isinstance(raw, dict) else {}, path, errors)
    d["demand"] = _merge(PRODUCT_DEFAULTS["demand"], d["demand"] if isinstance(d["demand"], dict) else {},
                         path + "demand.", errors)
    for k in ("price", "unit_cost"):
        _num(d[k], path + k, errors, 0, lo_open=True)
    for k in ("holding_cost", "lost_sale_penalty"):
        _num(d[k], path + k, errors, 0)
    _num(d["gamma"], path + "gamma", errors, 0, 1, lo_open=True)
    if isinstance(d["price"], (int, float)) and isinstance(d["unit_cost"], (int, float)) and d["price"] <= d["unit_cost"]:
        errors.append(f"{path}price: must exceed unit_cost")
    dm = d["demand"]
    _choice(dm["family"], DEMAND_FAMILIES, path + "demand.family", errors)
    _num(dm["base_rate"], path + "demand.base_rate", errors, 0)
    _num(dm["seasonal_amplitude"], path + "demand.seasonal_amplitude", errors, 0, 1, hi_open=True)
    _num(dm["seasonal_period"], path + "demand.seasonal_period", errors, 0, lo_open=True)
    _num(dm["trend"], path + "demand.trend", errors)
    _num(dm["dispersion"], path + "demand.dispersion", errors, 0, lo_open=True)
    pmf = d["vlt_pmf"]
    if not isinstance(pmf, list) or not pmf or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0 for v in pmf):
        errors.append(f"{path}vlt_pmf: expected a nonempty list of nonnegative numbers")
    elif abs(sum(pmf) - 1) > 1e-9:
        errors.append(f"{path}vlt_pmf: must sum to 1")
    if d["L_max"] is not None:
        _num(d["L_max"], path + "L_max", errors, 1, integer=True)
    if d["initial_on_hand"] is not None:
        _num(d["initial_on_hand"], path + "initial_on_hand", errors, 0, integer=True)
    return d


def _check_policy(raw, path, errors) -> dict:
    if not isinstance(raw, dict):
        errors.append(f"{path}: expected a mapping")
        return {}
    base = {"name": None, "kind": None, **POLICY_DEFAULTS}
    d = _merge(base, raw, path + ".", errors)
    if not isinstance(d["name"], str) or not d["name"]:
        errors.append(f"{path}.name: required string")
    _choice(d["kind"], POLICY_KINDS, path + ".kind", errors)
    if d["q"] is not None:
        _num(d["q"], path + ".q", errors, 0, 1, lo_open=True, hi_open=True)
    if d["kind"] == "base_stock":
        if d["S"] is None:
            errors.append(f"{path}.S: required for base_stock")
        else:
            _num(d["S"], path + ".S", errors, 0, integer=True)
    _num(d["scale"], path + ".scale", errors, 0, lo_open=True)
    _choice(d["scale_mode"], ("target", "order"), path + ".scale_mode", errors)
    _num(d["tune_seeds"], path + ".tune_seeds", errors, 1, integer=True)
    return d


def check_config(raw: Any) -> dict:
    """Merge defaults into ``raw`` and check everything; raise ConfigError listing every problem."""
    errors: list[str] = []
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: expected a mapping"])
    cfg = _merge(DEFAULTS, raw, "", errors)

    if cfg["master_seed"] is None:
        errors.append("master_seed: required (no implicit entropy)")
    else:
        _num(cfg["master_seed"], "master_seed", errors, 0, integer=True)
    _num(cfg["n_seeds"], "n_seeds", errors, 1, integer=True)
    if not isinstance(cfg["output_dir"], str):
        errors.append("output_dir: expected a path string")
    _num(cfg["train_horizon"], "train_horizon", errors, 1, integer=True)
    _num(cfg["test_horizon"], "test_horizon", errors, 1, integer=True)
    _num(cfg["warmup"], "warmup", errors, 0, integer=True)
    _choice(cfg["schedule_mode"], ("per_product_random_week", "explicit"), "schedule_mode", errors)
    _choice(cfg["training_design"], ("balanced", "random"), "training_design", errors)

    cfg["bandit"] = _check_bandit(cfg["bandit"], errors)
    H = cfg["bandit"]["H"] if isinstance(cfg["bandit"]["H"], int) else 0

    cfg["schedule"] = _week_list(cfg["schedule"], "schedule", errors)
    for problem in schedule_violations(cfg["schedule"], H):
        errors.append(f"schedule: {problem}")
    if cfg["schedule_mode"] == "explicit" and isinstance(cfg["test_horizon"], int):
        if any(w >= cfg["test_horizon"] for w in cfg["schedule"]):
            errors.append("schedule: weeks must be < test_horizon")
        if len(cfg["bandit"]["multipliers"]) ** len(cfg["schedule"]) > 3 ** 8:
            errors.append("schedule: too many weeks for the exhaustive oracle")
    elif isinstance(cfg["test_horizon"], int) and isinstance(cfg["warmup"], int):
        if cfg["warmup"] >= cfg["test_horizon"] - H:
            errors.append("warmup: leaves no room for a bandit week plus its H-week label window")

    products = cfg["products"]
    if not isinstance(products, dict) or len(products) != 1 or next(iter(products)) not in ("generator", "list"):
        errors.append("products: expected exactly one of 'generator' or 'list'")
        cfg["products"] = {"generator": _check_generator({}, [])}
    elif "generator" in products:
        cfg["products"] = {"generator": _check_generator(products["generator"], errors)}
    else:
        items = products["list"]
        if not isinstance(items, list) or not items:
            errors.append("products.list: expected a nonempty list")
            items = []
        cfg["products"] = {"list": [_check_product(p, f"products.list[{i}].", errors) for i, p in enumerate(items)]}

    pols = cfg["policies"]
    if not isinstance(pols, list) or not pols:
        errors.append("policies: expected a nonempty list")
        pols = []
    cfg["policies"] = [_check_policy(p, f"policies[{i}]", errors) for i, p in enumerate(pols)]
    names = [p.get("name") for p in cfg["policies"]]
    for n in {n for n in names if names.count(n) > 1}:
        errors.append(f"policies: duplicate name {n!r}")

    eq = _merge(DEFAULTS["equilibrium"], cfg["equilibrium"] if isinstance(cfg["equilibrium"], dict) else {},
                "equilibrium.", errors)
    if not isinstance(eq["enabled"], bool):
        errors.append("equilibrium.enabled: expected true/false")
    eq["schedule"] = _week_list(eq["schedule"], "equilibrium.schedule", errors)
    for problem in schedule_violations(eq["schedule"], H):
        errors.append(f"equilibrium.schedule: {problem}")
    if isinstance(cfg["test_horizon"], int) and any(w >= cfg["test_horizon"] for w in eq["schedule"]):
        errors.append("equilibrium.schedule: weeks must be < test_horizon")
    if len(cfg["bandit"]["multipliers"]) ** len(eq["schedule"]) > 3 ** 8:
        errors.append("equilibrium.schedule: exhaustive search exceeds 3^8 assignments")
    _num(eq["n_products"], "equilibrium.n_products", errors, 1, integer=True)
    _num(eq["n_seeds"], "equilibrium.n_seeds", errors, 1, integer=True)
    cfg["equilibrium"] = eq

    if errors:
        raise ConfigError(errors)
    return cfg


def generate_products(gen: dict, horizon: int) -> list[ProductConfig]:
    """Draw a cohort from the generator ranges; product ``i`` uses its own substream."""
    out = []
    L = gen["L_max"]
    for i in range(gen["count"]):
        g = rng.substream(gen["seed"], i, "products")
        u = lambda key: g.uniform(*gen[key])  # noqa: E731
        price = u("price")
        cost = price * u("cost_ratio")
        hold = cost * u("holding_ratio")
        pen = price * u("penalty_ratio")
        rate = u("base_rate")
        amp = u("seasonal_amplitude")
        trend = u("trend")
        disp = u("dispersion")
        pmf = g.dirichlet(np.full(L, gen["vlt_concentration"]))
        pmf = [float(x) for x in pmf[:-1]] + [max(0.0, 1.0 - float(np.sum(pmf[:-1])))]
        demand = DemandModel(gen["family"], rate, amp, gen["seasonal_period"], trend, disp)
        out.append(ProductConfig(
            price, cost, hold, pen, gen["gamma"], demand, VltModel(tuple(pmf)), L, horizon,
            initial_on_hand=int(round(rate)),
        ))
    return out


def product_from_dict(d: dict, horizon: int) -> ProductConfig:
    dm = d["demand"]
    pmf = tuple(float(v) for v in d["vlt_pmf"])
    L = d["L_max"] if d["L_max"] is not None else len(pmf)
    rate = float(dm["base_rate"])
    return ProductConfig(
        float(d["price"]), float(d["unit_cost"]), float(d["holding_cost"]), float(d["lost_sale_penalty"]),
        float(d["gamma"]),
        DemandModel(dm["family"], rate, float(dm["seasonal_amplitude"]), float(dm["seasonal_period"]),
                    float(dm["trend"]), float(dm["dispersion"])),
        VltModel(pmf), L, horizon,
        initial_on_hand=int(round(rate)) if d["initial_on_hand"] is None else int(d["initial_on_hand"]),
    )


def build_config(cfg: dict) -> ExperimentConfig:
    """Turn a checked, defaults-filled mapping into an ExperimentConfig."""
    T = cfg["test_horizon"]
    errors = []
    if "generator" in cfg["products"]:
        products = generate_products(cfg["products"]["generator"], T)
    else:
        products = []
        for i, d in enumerate(cfg["products"]["list"]):
            try:
                products.append(product_from_dict(d, T))
            except ValueError as exc:
                errors.append(f"products.list[{i}]: {exc}")
        if len({p.L_max for p in products}) > 1:
            errors.append("products.list: all products must share L_max (pad vlt_pmf or set L_max)")
    if errors:
        raise ConfigError(errors)
    b = cfg["bandit"]
    bandit = BanditConfig(
        H=b["H"], rho=float(b["rho"]), exploration=b["exploration"], multipliers=tuple(b["multipliers"]),
        baseline_boost=float(b["baseline_boost"]), ridge_lambda=float(b["ridge_lambda"]),
        decay=b["decay"], pooled=b["pooled"],
    )
    eq = cfg["equilibrium"]
    return ExperimentConfig(
        master_seed=cfg["master_seed"],
        products=products,
        policies=[PolicySpec(**p) for p in cfg["policies"]],
        bandit=bandit,
        n_seeds=cfg["n_seeds"],
        output_dir=cfg["output_dir"],
        train_horizon=cfg["train_horizon"],
        test_horizon=T,
        warmup=cfg["warmup"],
        schedule_mode=cfg["schedule_mode"],
        schedule=tuple(cfg["schedule"]),
        training_design=cfg["training_design"],
        equilibrium=EquilibriumSpec(eq["enabled"], tuple(eq["schedule"]), eq["n_products"], eq["n_seeds"]),
        resolved=cfg,
    )


def validate_config(raw_text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse YAML/JSON text into an ExperimentConfig, or raise ConfigError with every violation."""
    try:
        raw = yaml.safe_load(raw_text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"<root>: not valid YAML/JSON: {exc}"]) from None
    if overrides:
        raw = dict(raw or {})
        raw.update(overrides)
    return build_config(check_config(raw))


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    return validate_config(Path(path).read_text(), overrides)


def dump_resolved(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.resolved, sort_keys=True, default_flow_style=None)


# ---------------------------------------------------------------------------
# orchestration


def build_policies(spec: PolicySpec, products: Sequence[ProductConfig], master_seed: int) -> list:
    """One concrete policy per product (tuning happens here for tuned base-stock)."""
    if spec.kind == "newsvendor":
        inner = [Newsvendor(spec.q)] * len(products)
    elif spec.kind == "base_stock":
        inner = [BaseStock(spec.S)] * len(products)
    else:
        seed = rng.derive_seed(master_seed, "tune")
        inner = [
            tune_base_stock(c, default_base_stock_grid(c), spec.tune_seeds, seed=seed, product_id=i)
            for i, c in enumerate(products)
        ]
    if spec.scale == 1.0:
        return inner
    return [Scaled(p, spec.scale, spec.scale_mode) for p in inner]


def training_weeks(g: np.random.Generator, T: int, H: int, warmup: int) -> np.ndarray:
    """Scheduled training weeks: a random offset, then every H+1 weeks while the label fits."""
    start = int(g.integers(warmup, warmup + H + 1))
    return np.arange(start, T - H, H + 1)


def collect_training(
    policies: Sequence, products: Sequence[ProductConfig], bandit: BanditConfig,
    n_seeds: int, master_seed: int, warmup: int, design: str = "balanced",
) -> tuple[RidgeAccumulator, dict[int, RidgeAccumulator]]:
    """Simulate training replicates with random multipliers and accumulate labels.

    ``design="random"`` plays an independent uniform multiplier on each
    scheduled week. ``design="balanced"`` runs one common-random-number copy
    per multiplier and deals the multipliers to the copies by a random
    permutation each scheduled week: every copy still sees uniformly random
    multipliers, but the copies share their demand noise, which the action
    terms of the regression then cancel.
    """
    H = bandit.H
    mult = np.asarray(bandit.multipliers)
    K = len(mult) if design == "balanced" else 1
    n = len(products)
    T = products[0].horizon_T
    pooled = RidgeAccumulator(bandit.dim)
    per_product = {i: RidgeAccumulator(bandit.dim) for i in range(n)} if not bandit.pooled else {}
    statics = np.repeat(np.array([c.statics for c in products], dtype=float), K, axis=0)
    for r in range(n_seeds):
        seed = rng.derive_seed(master_seed, "train", r)
        M = np.ones((n * K, T))
        row_ids, taus = [], []
        for i in range(n):
            g = rng.substream(seed, i, "explore")
            weeks = training_weeks(g, T, H, warmup)
            for t in weeks:
                if K == 1:
                    M[i, t] = mult[g.integers(len(mult))]
                else:
                    M[i * K:(i + 1) * K, t] = mult[g.permutation(K)]
            for k in range(K):
                row_ids.append(np.full(len(weeks), i * K + k))
                taus.append(weeks)
        batch = simulate_batch(
            [p for p in policies for _ in range(K)], [c for c in products for _ in range(K)],
            [seed] * (n * K), [i for i in range(n) for _ in range(K)], M,
        )
        rows = np.concatenate(row_ids)
        tt = np.concatenate(taus)
        if rows.size == 0:
            continue
        X = np.zeros((rows.size, bandit.dim))
        for t in np.unique(tt):
            sel = tt == t
            X[sel] = batch_features(batch, statics, rows[sel], int(t), H)
        y = batch_labels(batch.rewards, batch.gammas, rows, tt, H)
        a = M[rows, tt]
        if bandit.pooled:
            pooled.add(X, a, y)
        else:
            prod = rows // K
            for i in np.unique(prod):
                sel = prod == i
                per_product[int(i)].add(X[sel], a[sel], y[sel])
    return pooled, per_product


def test_schedules(cfg: ExperimentConfig) -> list[TargetSchedule]:
    H = cfg.bandit.H
    if cfg.schedule_mode == "explicit":
        return [TargetSchedule(cfg.schedule, H)] * len(cfg.products)
    seed = rng.derive_seed(cfg.master_seed, "schedule")
    T = cfg.test_horizon
    return [
        TargetSchedule((int(rng.substream(seed, i, "schedule").integers(cfg.warmup, T - H)),), H)
        for i in range(len(cfg.products))
    ]


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_") or "policy"


@dataclass
class PolicyResult:
    report: AuditReport
    run: Any
    schedules: list[TargetSchedule]
    r_baseline: np.ndarray
    r_bandit: np.ndarray
    r_oracle: np.ndarray
    oracle_assignments: list[tuple[float, ...]]
    policies: list


def audit_policy(cfg: ExperimentConfig, spec: PolicySpec) -> PolicyResult:
    bc = cfg.bandit
    products = cfg.products
    n = len(products)
    pols = build_policies(spec, products, cfg.master_seed)
    train_products = [dataclasses.replace(c, horizon_T=cfg.train_horizon) for c in products]
    log.info("%s: training on %d replicates", spec.name, cfg.n_seeds)
    pooled, per_product = collect_training(
        pols, train_products, bc, cfg.n_seeds, cfg.master_seed, cfg.warmup, cfg.training_design)
    warm = pooled if bc.pooled else per_product
    prior = pooled.n if bc.pooled else sum(a.n for a in per_product.values())

    test_seed = rng.derive_seed(cfg.master_seed, "test")
    schedules = test_schedules(cfg)
    log.info("%s: bandit test phase", spec.name)
    run = run_bandit(pols, schedules, bc, products, test_seed, warm_start=warm, prior_interventions=prior)
    r_bandit = run.batch.total_discounted_reward
    seeds = [test_seed] * n
    pids = list(range(n))
    if cfg.schedule_mode == "explicit":
        weeks = [list(s.times) for s in schedules]
        r_base, r_oracle, assignments = joint_oracle(pols, products, seeds, pids, weeks, bc.multipliers)
    else:
        weeks = [s.times[0] for s in schedules]
        roll = rollout_rewards(pols, products, seeds, pids, weeks, bc.multipliers)
        best = best_index(roll, bc.multipliers)
        r_base = roll[:, bc.baseline_index]
        r_oracle = roll[np.arange(n), best]
        assignments = [(bc.multipliers[j],) for j in best]

    epsilon = None
    eq = cfg.equilibrium
    if eq.enabled and eq.schedule:
        sched = TargetSchedule(eq.schedule, bc.H)
        eq_seeds = [rng.derive_seed(cfg.master_seed, "equilibrium", s) for s in range(eq.n_seeds)]
        gaps = np.concatenate([
            equilibrium_gap_samples(pols[i], products[i], eq_seeds, sched, bc.multipliers, product_id=i)
            for i in range(min(eq.n_products, n))
        ])
        epsilon = (float(gaps.mean()), float(gaps.std(ddof=1) / np.sqrt(len(gaps))) if len(gaps) > 1 else 0.0)

    report = build_report(
        spec.name, run.log, r_bandit, r_base, r_oracle,
        oracle_multipliers=[m for a in assignments for m in a],
        epsilon=epsilon,
        seeds={"master": cfg.master_seed, "test": test_seed, "n_train_replicates": cfg.n_seeds},
    )
    return PolicyResult(report, run, schedules, r_base, r_bandit, r_oracle, assignments, pols)


def _per_product_csv(res: PolicyResult) -> str:
    chosen: dict[int, list[float]] = {}
    for e in res.run.log:
        chosen.setdefault(e.product_id, []).append(e.multiplier)
    lines = ["product_id,weeks,multipliers,oracle_multipliers,r_baseline,r_bandit,r_oracle"]
    for i, s in enumerate(res.schedules):
        lines.append(",".join([
            str(i), " ".join(map(str, s.times)), " ".join(repr(m) for m in chosen.get(i, [])),
            " ".join(repr(m) for m in res.oracle_assignments[i]),
            repr(float(res.r_baseline[i])), repr(float(res.r_bandit[i])), repr(float(res.r_oracle[i])),
        ]))
    return "\n".join(lines) + "\n"


TRAJECTORY_COLUMNS = ["product_id", "t", "on_hand_start", "arrivals", "demand", "sales", "lost_sales",
                      "order", "reward"]


def batch_to_csv(batch) -> str:
    """Long-format trajectory dump, one row per (product, week)."""
    n, T = batch.rewards.shape
    cols = [batch.on_hand_start, batch.arrivals, batch.demand, batch.sales, batch.lost_sales, batch.orders]
    lines = [",".join(TRAJECTORY_COLUMNS)]
    for i in range(n):
        for t in range(T):
            lines.append(",".join([str(i), str(t)] + [str(int(c[i, t])) for c in cols]
                                  + [repr(float(batch.rewards[i, t]))]))
    return "\n".join(lines) + "\n"


def report_meta(cfg: ExperimentConfig) -> dict:
    resolved = {k: v for k, v in cfg.resolved.items() if k != "output_dir"}
    return {"config": resolved, "master_seed": cfg.master_seed, "n_products": len(cfg.products)}


def run_experiment(
    cfg: ExperimentConfig, out_dir: str | Path | None = None, policy_names: Sequence[str] | None = None,
) -> list[AuditReport]:
    """Audit every configured policy and write reports, logs and snapshots to ``out_dir``."""
    specs = cfg.policies if not policy_names else [cfg.policy(n) for n in policy_names]
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(dump_resolved(cfg))
    reports = []
    for spec in specs:
        res = audit_policy(cfg, spec)
        reports.append(res.report)
        d = out / slug(spec.name)
        d.mkdir(exist_ok=True)
        (d / "action_log.csv").write_text(log_to_csv(res.run.log, cfg.bandit.multipliers))
        (d / "snapshots.txt").write_text(snapshots_to_text(res.run.snapshots))
        (d / "per_product.csv").write_text(_per_product_csv(res))
        (d / "trajectories.csv").write_text(batch_to_csv(res.run.batch))
    (out / "report.json").write_text(reports_to_json(reports, report_meta(cfg)))
    (out / "report.txt").write_text(format_table(reports))
    return reports
