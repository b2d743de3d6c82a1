"""Command line entry point: ``flgames run|sweep|gen-data|verify``."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import harness, verify
from .errors import FLGamesError


def _override(cfg: harness.ExperimentConfig, args) -> harness.ExperimentConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    game = cfg.game
    if args.max_rounds is not None:
        game = dataclasses.replace(game, max_rounds=args.max_rounds)
    if args.variant is not None:
        if args.variant in (harness.FEDAVG, harness.FEDSGD):
            changes["method"] = args.variant
        else:
            game = harness.apply_variant(game, args.variant)
    changes["game"] = game
    return dataclasses.replace(cfg, **changes)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flgames", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "run one configuration over its repeat seeds"),
        ("sweep", "run every cell of the config's sweep section"),
        ("gen-data", "write the configured datasets as binary caches"),
    ):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("config", help="key = value config file")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--out", help="output directory override")
        sp.add_argument("--threads", type=int, default=1, help="repeats run concurrently")
        sp.add_argument("--max-rounds", type=int, dest="max_rounds")
        sp.add_argument(
            "--variant",
            choices=sorted(harness.VARIANT_PRESETS) + [harness.FEDAVG, harness.FEDSGD],
            help="replace the configured variant",
        )
        if name == "sweep":
            sp.add_argument("--table", action="store_true",
                            help="ignore the sweep section and run the 8-variant grid plus baselines")
    sub.add_parser("verify", help="run the built-in gradient, data and metric oracles")
    return p


def _print_summary(s: harness.MetricsSummary) -> None:
    stop = "-" if s.rounds_to_stop_mean is None else f"{s.rounds_to_stop_mean:.1f}"
    print(f"{s.variant}: train {s.train_mean:.4f} +- {s.train_std:.4f}  "
          f"test {s.test_mean:.4f} +- {s.test_std:.4f}  stop {stop} ({s.stopped_runs}/{s.n_runs})")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        return 0 if verify.run_all() else 1
    try:
        cfg = _override(harness.load_config(args.config), args)
        if args.command == "run":
            _print_summary(harness.run_experiment(cfg, threads=args.threads))
        elif args.command == "sweep":
            if args.table:
                cfg = harness.table_grid(cfg)
            for cell in harness.run_sweep(cfg, threads=args.threads):
                print(f"n={cell.n_clients} ", end="")
                _print_summary(cell.summary)
        else:
            for path in harness.generate_data(cfg):
                print(path)
    except FLGamesError as exc:
        print(f"flgames: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
