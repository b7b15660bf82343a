"""What-if tables for the unlearning-level and minimum-step bounds with user-supplied constants."""

from __future__ import annotations

import argparse
import csv
import math
import sys
from typing import NamedTuple, Sequence

from .accountant import BoundInputs, InfeasibleBound, eval_unlearning_bound, min_steps_bound


class StepsRow(NamedTuple):
    delta: float
    privacy_loss: float
    k: float
    raw_k: float
    flag: str  # "ok", "degenerate" (negative or -inf bound clamped to 0) or "infeasible"


def tabulate_epsilon_star(inputs: BoundInputs, k_values: Sequence[float]) -> list[tuple[float, float]]:
    """(k, eps*) for each k, with every other input held fixed."""
    out = []
    for k in k_values:
        b = BoundInputs(inputs.eps_prime_4a, inputs.eps_4am1, inputs.eps_2am1, inputs.contraction_C,
                        inputs.alpha, float(k))
        out.append((float(k), eval_unlearning_bound(b)))
    return out


def tabulate_min_steps(deltas: Sequence[float], A_alpha: float, B_alpha: float, C_alpha: float,
                       eps_4am1: float, eps_2am1: float, privacy_losses: Sequence[float]) -> list[StepsRow]:
    """Minimum fine-tuning steps for every (delta, privacy loss) pair.

    Rows where delta does not exceed eps_{2a-1} are flagged infeasible with k = nan.
    A bound below zero (including -inf when the numerator vanishes) is reported as 0.
    """
    rows = []
    for delta in deltas:
        for P in privacy_losses:
            try:
                k = min_steps_bound(float(delta), A_alpha, B_alpha, C_alpha, float(P), eps_4am1, eps_2am1)
            except InfeasibleBound:
                rows.append(StepsRow(float(delta), float(P), math.nan, math.nan, "infeasible"))
                continue
            if k < 0:
                rows.append(StepsRow(float(delta), float(P), 0.0, k, "degenerate"))
            else:
                rows.append(StepsRow(float(delta), float(P), k, k, "ok"))
    return rows


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearn-bounds", description=__doc__)
    sub = p.add_subparsers(dest="table", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--alpha", type=float, required=True, help="Renyi order, > 1")
    common.add_argument("--eps2am1", type=float, required=True, help="stationarity gap at order 2a-1")
    common.add_argument("--eps4am1", type=float, required=True, help="stationarity gap at order 4a-1")
    common.add_argument("--out", default="-", help="CSV destination (default stdout)")

    e = sub.add_parser("epsilon", parents=[common], help="eps* as a function of k")
    e.add_argument("--C", type=float, required=True, help="contraction constant")
    e.add_argument("--eps-prime-4a", type=float, required=True, dest="eps_prime_4a")
    e.add_argument("--k", type=_floats, required=True, help="comma-separated step counts")

    s = sub.add_parser("steps", parents=[common], help="minimum steps as a function of delta and P")
    s.add_argument("--A", type=float, required=True)
    s.add_argument("--B", type=float, required=True)
    s.add_argument("--Cc", type=float, required=True, help="coefficient on eps_{4a-1}")
    s.add_argument("--delta", type=_floats, required=True, help="comma-separated targets")
    s.add_argument("--P", type=_floats, required=True, help="comma-separated per-instance privacy losses")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        if args.table == "epsilon":
            try:
                inputs = BoundInputs(args.eps_prime_4a, args.eps4am1, args.eps2am1, args.C, args.alpha, 0.0)
            except ValueError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return 1
            w.writerow(["k", "eps_star"])
            for k, eps in tabulate_epsilon_star(inputs, args.k):
                w.writerow([repr(k), repr(eps)])
        else:
            if not args.alpha > 1:
                print("error: alpha must exceed 1", file=sys.stderr)
                return 1
            w.writerow(["delta", "P", "k", "raw_k", "flag"])
            for r in tabulate_min_steps(args.delta, args.A, args.B, args.Cc, args.eps4am1, args.eps2am1, args.P):
                w.writerow([repr(r.delta), repr(r.privacy_loss), repr(r.k), repr(r.raw_k), r.flag])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
