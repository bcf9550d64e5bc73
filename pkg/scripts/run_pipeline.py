#!/usr/bin/env python3
"""Run the full synthetic pipeline end to end through the CLI.

Generates a scene, reconstructs it, geo-registers, fits the road plane,
localizes the query camera, measures the marked distances, reads the speed
trap, builds a heatmap, and evaluates everything against the truth sidecar.

    python3 scripts/run_pipeline.py --out-dir /tmp/scene --panos 10 --seed 0
"""

import argparse
import os
import sys

from pancal import cli, io


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="pipeline_out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--panos", type=int, default=10)
    ap.add_argument("--points", type=int, default=2000)
    ap.add_argument("--noise-sigma", type=float, default=0.0)
    ap.add_argument("--views-per-pano", type=int, default=12)
    ap.add_argument("--fov", type=float, default=90.0)
    ap.add_argument("--width", type=int, default=1920)
    ap.add_argument("--height", type=int, default=1080)
    args = ap.parse_args()

    base = ["--seed", str(args.seed), "--out-dir", args.out_dir]
    sampling = [
        "--views-per-pano", str(args.views_per_pano),
        "--fov", str(args.fov),
        "--width", str(args.width),
        "--height", str(args.height),
    ]
    d = args.out_dir
    steps = [
        ["synth", "--panos", str(args.panos), "--points", str(args.points),
         "--noise-sigma", str(args.noise_sigma), *sampling],
        ["reconstruct", *sampling, "--road-labels", os.path.join(d, io.ROAD_LABELS_FILE)],
        ["georegister", "--origin", "40.44,-79.95,240.0"],
        ["fit-plane"],
        ["localize", "--image-size", "1600x1200"],
        ["measure"],
        ["speed"],
        ["heatmap"],
        ["eval",
         "--reconstruction", os.path.join(d, io.RECONSTRUCTION_FILE),
         "--calibration", os.path.join(d, io.CALIBRATION_FILE),
         "--plane", os.path.join(d, io.PLANE_FILE)],
    ]
    for step in steps:
        code = cli.main(base + step)
        if code != 0:
            print(f"step {step[0]} failed with exit code {code}", file=sys.stderr)
            return code
    print(f"pipeline complete; outputs in {d}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
