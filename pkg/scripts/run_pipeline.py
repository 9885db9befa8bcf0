#!/usr/bin/env python3
"""End-to-end demo: synthesize a fleet, train all four models, score them
on held-out flights and diagnose a healthy/degraded pair.

Everything goes through the CLI, so the run doubles as a smoke test of the
command surface. Outputs land in --out (default ./pipeline_out).
"""

import argparse
import sys
from pathlib import Path

from vphm.cli import main as vphm


SCENARIO = """\
# synthetic inspection mission
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
    train_dir = root / "train"
    test_dir = root / "test"
    diag_dir = root / "diag"

    def check(rc, what):
        if rc != 0:
            sys.exit(f"{what} failed with exit code {rc}")

    # one scenario per flight so load profiles differ across the fleet
    for k in range(args.train_flights):
        spec = root / f"train-{k}.kv"
        spec.write_text(SCENARIO.format(duration=args.train_duration,
                                        seed=100 + k, flight_id=f"train-{k}"))
        check(vphm(["simulate", "--spec", str(spec), "--out",
                    str(train_dir)]), "simulate")
    for k in range(args.test_flights):
        spec = root / f"test-{k}.kv"
        spec.write_text(SCENARIO.format(duration=args.test_duration,
                                        seed=200 + k, flight_id=f"test-{k}"))
        check(vphm(["simulate", "--spec", str(spec), "--out",
                    str(test_dir)]), "simulate")

    # healthy + degraded pair on a shared mission profile
    spec = root / "diag.kv"
    spec.write_text(SCENARIO.format(duration=args.test_duration, seed=300,
                                    flight_id="diag"))
    check(vphm(["simulate", "--spec", str(spec), "--out", str(diag_dir),
                "--fleet", "2", "--scales", "1.0,0.8"]), "simulate")

    models = []
    for kind in args.models.split(","):
        out = root / f"model-{kind}.vphm"
        cmd = ["train", "--data", str(train_dir), "--kind", kind,
               "--out", str(out), "--seed", str(args.seed)]
        if args.epochs:
            cmd += ["--epochs", str(args.epochs)]
        check(vphm(cmd), f"train {kind}")
        models.append(str(out))

    check(vphm(["evaluate", "--models", *models, "--data", str(test_dir),
                "--out", str(root / "scores"), "--seed", str(args.seed)]),
          "evaluate")
    check(vphm(["diagnose", "--model", models[0], "--data", str(diag_dir),
                "--out", str(root / "health"), "--seed", str(args.seed)]),
          "diagnose")

    print("\n== score table ==")
    print((root / "scores" / "report.txt").read_text())
    print("== health table ==")
    print((root / "health" / "health.txt").read_text())


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="pipeline_out")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--train-flights", type=int, default=4)
    parser.add_argument("--test-flights", type=int, default=2)
    parser.add_argument("--train-duration", type=int, default=600)
    parser.add_argument("--test-duration", type=int, default=900)
    parser.add_argument("--models", default="cnn,qlr",
                        help="comma list from cnn,qlr,qrf,qgb")
    parser.add_argument("--epochs", type=int, default=40,
                        help="override training epochs (0 = model default)")
    run(parser.parse_args())
