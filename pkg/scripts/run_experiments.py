"""Run the experiment drivers in sequence and collect their CSVs under one directory.

    python3 scripts/run_experiments.py                      # everything, desk profile
    python3 scripts/run_experiments.py transfer delivery --profile paper --out runs/paper

Each experiment writes to <out>/<name>/. The exit code is the worst one seen
(3 if any check failed, 2 on a configuration error).
"""
import argparse
import sys
import time

from krrl.harness.cli import main as krrl_main

EXPERIMENTS = ["modelcount", "merge", "entropy", "cdf", "delivery", "transfer", "learn"]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("names", nargs="*", help=f"subset of {', '.join(EXPERIMENTS)}")
    p.add_argument("--profile", default="desk", choices=["desk", "paper"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out", default="results")
    args = p.parse_args(argv)
    unknown = set(args.names) - set(EXPERIMENTS)
    if unknown:
        p.error(f"unknown experiment(s): {', '.join(sorted(unknown))}")

    worst = 0
    for name in args.names or EXPERIMENTS:
        cmd = [name, "--profile", args.profile, "--seed", str(args.seed), "--out", f"{args.out}/{name}"]
        if args.config:
            cmd += ["--config", args.config]
        if name != "learn":
            cmd.append("--check")
        print(f"== {name}", flush=True)
        t0 = time.time()
        code = krrl_main(cmd)
        print(f"== {name} exit {code} ({time.time() - t0:.0f}s)", flush=True)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
