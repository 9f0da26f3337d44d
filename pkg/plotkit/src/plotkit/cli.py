"""Command-line front end: ``plot pairs`` and ``plot ess``."""

import argparse
import sys

from .essfig import ess_plot
from .io import read_ess_table, read_tidy_samples
from .pairs import pairs_plot


def build_parser():
    parser = argparse.ArgumentParser(
        prog="plot", description="Posterior comparison figures from CSV files"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pairs", help="pairs plot from a tidy samples CSV")
    p.add_argument("csv", help="tidy samples (source,parameter,value[,run])")
    p.add_argument("-o", "--out", required=True, help="output image path")

    p = sub.add_parser("ess", help="ESS/s comparison from ESS table CSVs")
    p.add_argument("csv", nargs="+", help="tables (x,source,ess_per_second)")
    p.add_argument("-o", "--out", required=True, help="output image path")
    p.add_argument("--x-label", default="experiment size")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "pairs":
            pairs_plot(read_tidy_samples(args.csv), args.out)
        else:
            ess_plot(read_ess_table(args.csv), args.out, x_label=args.x_label)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
