"""Command-line entry point: ``ccsmppi run | batch | verify | scenarios``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import CONTROLLERS, ConfigError, builtin_config, builtin_scenarios, load_config


def _load(arg: str):
    """A config path, or the stem of a built-in scenario."""
    if Path(arg).is_file():
        return load_config(arg)
    if arg in builtin_scenarios():
        return builtin_config(arg)
    raise ConfigError(f"{arg!r} is neither a file nor a built-in scenario ({', '.join(builtin_scenarios())})")


def _configure(args):
    cfg = _load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.controller is not None:
        changes["controller"] = args.controller
    if getattr(args, "n_sim", None) is not None:
        changes["n_sim"] = args.n_sim
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def cmd_batch(args, single: bool = False) -> int:
    from .harness import export, run_batch

    cfg = _configure(args)
    if single:
        cfg = cfg.replace(n_sim=1)
    episodes, stats = run_batch(cfg)
    out = Path(args.out or f"results/{cfg.name}_{cfg.controller}")
    export(episodes, stats, cfg, out)
    print(f"{cfg.name} [{cfg.controller}] seeds {cfg.seed}..{cfg.seed + cfg.n_sim - 1}")
    print(stats.row())
    print(f"results written to {out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(args.trials, args.seed or 0)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_scenarios(args) -> int:
    for name in builtin_scenarios():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccsmppi", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver fallbacks and warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, batch: bool):
        p.add_argument("--config", required=True, help="scenario YAML file or built-in scenario name")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--controller", choices=CONTROLLERS, help="controller (overrides the config)")
        p.add_argument("--out", help="output directory (default results/<scenario>_<controller>)")
        if batch:
            p.add_argument("--n-sim", type=int, help="number of episodes (overrides the config)")
            p.add_argument("--workers", type=int, help="parallel worker processes")

    common(sub.add_parser("run", help="simulate one episode and export it"), batch=False)
    common(sub.add_parser("batch", help="Monte-Carlo batch with summary statistics"), batch=True)
    v = sub.add_parser("verify", help="randomized invariant checks")
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    sub.add_parser("scenarios", help="list built-in scenarios")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_batch(args, single=True)
        if args.command == "batch":
            return cmd_batch(args)
        if args.command == "verify":
            return cmd_verify(args)
        return cmd_scenarios(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
