"""Command-line entry point: ``invaudit {validate,simulate,audit,equilibrium}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from invaudit import rng
from invaudit.bandit import TargetSchedule
from invaudit.evaluation import equilibrium_gap_samples, format_table, reports_to_json
from invaudit.harness import (
    ConfigError, batch_to_csv, build_policies, dump_resolved, load_config, report_meta, run_experiment, slug,
)
from invaudit.sim_core import simulate_batch


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invaudit", description="Inventory policy equilibrium auditor.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, policy=False, out=True, fmt=True):
        sp.add_argument("--config", required=True, help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override master_seed")
        if out:
            sp.add_argument("--out", default=None, help="output directory (default: config output_dir)")
        if policy:
            sp.add_argument("--policy", action="append", default=None,
                            help="policy name from the config (repeatable; default all)")
        if fmt:
            sp.add_argument("--format", choices=("table", "machine"), default="table")

    common(sub.add_parser("validate", help="check a config and print it with defaults filled in"),
           out=False, fmt=False)
    common(sub.add_parser("simulate", help="simulate one policy on the test cohort and dump trajectories"),
           policy=True)
    common(sub.add_parser("audit", help="train, run the bandit and report per policy"), policy=True)
    common(sub.add_parser("equilibrium", help="brute-force equilibrium gap on the configured schedule"),
           policy=True, out=False)
    return p


def _load(args):
    overrides = {"master_seed": args.seed} if args.seed is not None else None
    return load_config(args.config, overrides)


def cmd_validate(args) -> int:
    cfg = _load(args)
    sys.stdout.write(dump_resolved(cfg))
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    names = args.policy or [cfg.policies[0].name]
    if len(names) != 1:
        raise SystemExit("simulate takes exactly one --policy")
    spec = cfg.policy(names[0])
    n = len(cfg.products)
    pols = build_policies(spec, cfg.products, cfg.master_seed)
    seed = rng.derive_seed(cfg.master_seed, "test")
    batch = simulate_batch(pols, cfg.products, [seed] * n, list(range(n)))
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"trajectories_{slug(spec.name)}.csv"
    path.write_text(batch_to_csv(batch))
    totals = batch.total_discounted_reward
    summary = {"policy": spec.name, "n_products": n, "seed": seed, "trajectories": str(path),
               "mean_discounted_reward": float(totals.mean()), "total_discounted_reward": float(totals.sum())}
    if args.format == "machine":
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        for k, v in summary.items():
            print(f"{k:>24}: {v}")
    return 0


def cmd_audit(args) -> int:
    cfg = _load(args)
    out = args.out or cfg.output_dir
    reports = run_experiment(cfg, out, args.policy)
    if args.format == "machine":
        sys.stdout.write(reports_to_json(reports, report_meta(cfg)))
    else:
        sys.stdout.write(format_table(reports))
    return 0


def cmd_equilibrium(args) -> int:
    cfg = _load(args)
    eq = cfg.equilibrium
    if not eq.schedule:
        raise ConfigError(["equilibrium.schedule: empty; nothing to search"])
    specs = cfg.policies if not args.policy else [cfg.policy(n) for n in args.policy]
    sched = TargetSchedule(eq.schedule, cfg.bandit.H)
    seeds = [rng.derive_seed(cfg.master_seed, "equilibrium", s) for s in range(eq.n_seeds)]
    k = min(eq.n_products, len(cfg.products))
    rows = []
    for spec in specs:
        pols = build_policies(spec, cfg.products[:k], cfg.master_seed)
        gaps = np.concatenate([
            equilibrium_gap_samples(pols[i], cfg.products[i], seeds, sched, cfg.bandit.multipliers, product_id=i)
            for i in range(k)
        ])
        se = float(gaps.std(ddof=1) / np.sqrt(len(gaps))) if len(gaps) > 1 else 0.0
        rows.append({"policy": spec.name, "epsilon_hat": float(gaps.mean()), "stderr": se,
                     "max": float(gaps.max()), "samples": int(len(gaps))})
    if args.format == "machine":
        print(json.dumps({"schedule": list(eq.schedule), "rows": rows}, indent=2, sort_keys=True))
    else:
        print(f"schedule weeks {list(eq.schedule)}, {k} products x {eq.n_seeds} seeds")
        for r in rows:
            print(f"{r['policy']:>24}: eps_hat {r['epsilon_hat']:.5g} (se {r['stderr']:.2g}, max {r['max']:.4g})")
    return 0


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "audit": cmd_audit,
            "equilibrium": cmd_equilibrium}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print("configuration errors:", file=sys.stderr)
        for e in exc.errors:
            print(f"  - {e}", file=sys.stderr)
        return 2
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
