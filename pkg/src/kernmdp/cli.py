"""Command-line entry point: ``kernmdp {run,oracle,report,selftest,config}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .env import oracle_value
from .harness import ExperimentConfig, build_env, run_experiment

log = logging.getLogger("kernmdp")


def _load(path):
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    return cfg.with_env_seed_override()


def cmd_run(args):
    cfg = _load(args.config)
    if args.timing:
        cfg.timing = True
    out = Path(args.out or cfg.out)
    results = run_experiment(cfg, out, jobs=args.jobs)
    failed = [r for r in results if not r.ok]
    for r in results:
        status = "ok" if r.ok else f"FAILED ({r.error})"
        final = f"R(T)={r.cum_regret[-1]:.3f}" if r.ok and r.rows else ""
        print(f"{r.stem}: {status} {final}".rstrip())
    print(f"wrote {len(results)} cells to {out}")
    return 1 if failed else 0


def cmd_oracle(args):
    cfg = _load(args.config)
    out = Path(args.out or cfg.out) / "oracle"
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        env = build_env(cfg.env, seed)
        values, policy = oracle_value(env)
        rec = {
            "seed": seed,
            "v_star": policy.value(env.initial_state, 0),
            "lipschitz_L": env.lipschitz_L,
            "policy": policy.to_dict(),
        }
        (out / f"oracle_seed{seed}.json").write_text(json.dumps(rec) + "\n")
        print(f"seed {seed}: V*_1(s_1) = {rec['v_star']:.6f}, L = {env.lipschitz_L:.3f}")
    return 0


def cmd_report(args):
    from .plotting import build_report

    summary = build_report(args.out, figures=not args.no_figures)
    for agent, entry in summary["agents"].items():
        mean, sd = entry["final_cum_regret_mean"], entry["final_cum_regret_sd"]
        if mean is None:
            print(f"{agent}: no finished episodes")
            continue
        print(f"{agent}: R(T) = {mean:.3f} +/- {sd or 0.0:.3f} over {entry['n_seeds']} seeds")
    for name in summary.get("figures", []):
        print(f"figure: {Path(args.out) / 'figures' / name}")
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    return 0 if run_selftest(args.only) else 1


def cmd_config(args):
    text = ExperimentConfig().to_json() + "\n"
    if args.path == "-":
        sys.stdout.write(text)
    else:
        Path(args.path).write_text(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="kernmdp", description="Kernelized RL experiments on synthetic MDPs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run all (agent, seed) cells of an experiment")
    r.add_argument("--config", help="experiment JSON (defaults to the built-in desk-scale config)")
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--jobs", type=int, default=None, help="parallel worker processes")
    r.add_argument("--timing", action="store_true", help="fill the wall_ms column (breaks byte-identical reruns)")
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("oracle", help="precompute V* and the optimal policy per seed")
    o.add_argument("--config")
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    rep = sub.add_parser("report", help="aggregate cell CSVs into report.json, long.csv and figures")
    rep.add_argument("--out", required=True, help="directory previously written by `run`")
    rep.add_argument("--no-figures", action="store_true")
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="run the fast invariant suite")
    s.add_argument("--only", nargs="*", help="names of checks to run")
    s.set_defaults(func=cmd_selftest)

    c = sub.add_parser("config", help="write the default experiment config")
    c.add_argument("path", nargs="?", default="-")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
