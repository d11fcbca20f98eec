#!/usr/bin/env python3
"""Run the synthetic class-incremental suite (Replay / GDumb / Naive) and
print the metric table plus the per-session seen-class curves: fine-tuning
collapses on shadowed old classes while rehearsal keeps them resolved."""

import argparse

from clbench import harness, suites


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    parser.add_argument("--out", help="persist run records under this directory")
    parser.add_argument("--format", default="text", choices=("text", "csv"))
    parser.add_argument("--curves", action="store_true", help="also print session curves")
    args = parser.parse_args()

    records = suites.run_ci_suite(seeds=tuple(args.seeds), out_dir=args.out)
    print(harness.report(records, fmt=args.format))
    if args.curves:
        for record in records:
            print(f"# {record.label}")
            print(harness.curve_csv(record))
    if args.out:
        print(f"records saved under {args.out}/<config-hash>/")


if __name__ == "__main__":
    main()
