#!/usr/bin/env python3
"""Run the synthetic domain-incremental suite (all ten regimes) and print
the metric table: plain fine-tuning forgets the rotated domains, rehearsal
and from-scratch retraining hold the top."""

import argparse

from clbench import harness, suites


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    parser.add_argument("--out", help="persist run records under this directory")
    parser.add_argument("--format", default="text", choices=("text", "csv"))
    args = parser.parse_args()

    records = suites.run_di_suite(seeds=tuple(args.seeds), out_dir=args.out)
    print(harness.report(records, fmt=args.format))
    if args.out:
        print(f"records saved under {args.out}/<config-hash>/")


if __name__ == "__main__":
    main()
