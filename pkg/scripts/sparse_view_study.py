#!/usr/bin/env python3
"""Sparse-view study: ground-distance error vs panorama count, with and
without the panoramic constraint, averaged over seeds.

Thin wrapper over `pancal sweep-panos`; writes sweep_panos.csv suitable for
external plotting.

    python3 scripts/sparse_view_study.py --out-dir /tmp/sweep --min 2 --max 10 --sweep-seeds 3
"""

import argparse

from pancal import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="sweep_out")
    ap.add_argument("--min", type=int, default=2)
    ap.add_argument("--max", type=int, default=10)
    ap.add_argument("--sweep-seeds", type=int, default=3)
    ap.add_argument("--noise-sigma", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    return cli.main(
        [
            "--seed", str(args.seed),
            "--out-dir", args.out_dir,
            "sweep-panos",
            "--min", str(args.min),
            "--max", str(args.max),
            "--sweep-seeds", str(args.sweep_seeds),
            "--noise-sigma", str(args.noise_sigma),
            "--verbose",
        ]
    )


if __name__ == "__main__":
    raise SystemExit(main())
