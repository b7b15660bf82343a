"""``unlearn-bench <subcommand> --config <path>``.

Exit status: 0 on success, 1 for configuration errors, 2 when a stage fails.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as pl
from .difficulty import spearman

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearn-bench", description="Per-instance privacy loss unlearning benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in pl.STAGES + ("run",):
        s = sub.add_parser(name)
        s.add_argument("--config", required=name != "correlate", help="experiment config (JSON)")
        s.add_argument("--force", action="store_true", help="rerun even if the manifest says up to date")
        if name == "split":
            s.add_argument("--size", type=int, help="override forget_set_size")
        if name == "run":
            s.add_argument("--until", choices=pl.STAGES, help="last stage to run")
        if name == "correlate":
            s.add_argument("--a", help="first score table (CSV with id and score/loss)")
            s.add_argument("--b", help="second score table")
    return p


def _correlate_tables(a, b) -> int:
    x, y = pl.read_score_table(a), pl.read_score_table(b)
    rho = spearman(x, y)
    print(f"spearman_rho={rho:.6f} n={len(x)}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "correlate" and (args.a or args.b):
            if not (args.a and args.b):
                print("config error: correlate needs both --a and --b", file=sys.stderr)
                return EXIT_CONFIG
            try:
                return _correlate_tables(args.a, args.b)
            except (OSError, ValueError) as exc:
                print(f"stage 'correlate' failed: {exc}", file=sys.stderr)
                return EXIT_STAGE
        if not args.config:
            print("config error: --config is required", file=sys.stderr)
            return EXIT_CONFIG
        cfg = pl.load_config(args.config)
        if args.command == "split" and args.size is not None:
            cfg = cfg.with_overrides(forget_set_size=args.size)
        if args.command == "run":
            pl.run_pipeline(cfg, until=args.until, force=args.force)
        else:
            pipe = pl.Pipeline(cfg)
            done = pipe.run_stage(args.command, force=args.force)
            if args.command == "correlate":
                for r in pl.read_rows(cfg.output_dir / "correlations.csv"):
                    if r["seed"] == "mean":
                        print(f"{r['subject'] or '-'} {r['quantity']}: spearman_rho={float(r['rho']):.4f} n={r['n']}")
            elif not done:
                print(f"{args.command}: up to date")
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
