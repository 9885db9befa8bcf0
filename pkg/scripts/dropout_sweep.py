#!/usr/bin/env python3
"""Dropout-rate sensitivity sweep.

Generates a small synthetic fleet, then trains one model per dropout rate
on identical data/seeds and tabulates epistemic spread, calibration,
sharpness and CRPS per rate (the `vphm sensitivity` subcommand does the
heavy lifting).
"""

import argparse
import sys
from pathlib import Path

from vphm.cli import main as vphm

SCENARIO = """\
duration = {duration}
sample_period = 1.0
chemistry = lipo-30ah
load_kind = random_walk
load_mean = 40.0
load_sigma = 2.0
load_lo = 10.0
load_hi = 80.0
sigma_v = 0.02
bias_kind = constant
bias_volts = 0.2
seed = {seed}
flight_id = {flight_id}
"""


def run(args):
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    data = root / "data"
    for k in range(args.flights):
        spec = root / f"f{k}.kv"
        spec.write_text(SCENARIO.format(duration=args.duration, seed=400 + k,
                                        flight_id=f"f{k}"))
        if vphm(["simulate", "--spec", str(spec), "--out", str(data)]) != 0:
            sys.exit("simulate failed")

    cmd = ["sensitivity", "--data", str(data), "--rates", args.rates,
           "--seed", str(args.seed), "--out", str(root)]
    if args.epochs:
        cmd += ["--epochs", str(args.epochs)]
    if vphm(cmd) != 0:
        sys.exit("sensitivity failed")
    print((root / "sensitivity.txt").read_text())


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="sweep_out")
    parser.add_argument("--rates", default="0.01,0.05,0.1,0.15,0.2")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--flights", type=int, default=4)
    parser.add_argument("--duration", type=int, default=800)
    parser.add_argument("--epochs", type=int, default=0,
                        help="override training epochs (0 = default 130)")
    run(parser.parse_args())
