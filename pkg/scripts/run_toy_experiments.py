"""Run every toy experiment over the default seeds and write CSVs plus dumps.

    python3 scripts/run_toy_experiments.py --out-dir toy_out
"""

import argparse
import logging
import time
from pathlib import Path

from nbrselect.toy.lab import DEFAULT_SEEDS, EXPERIMENTS, run_experiment, write_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out-dir", type=Path, default=Path("toy_out"))
    p.add_argument("--only", nargs="*", choices=sorted(EXPERIMENTS), help="subset of experiments")
    p.add_argument("--seeds", type=int, nargs="*", default=list(DEFAULT_SEEDS))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    for name in args.only or EXPERIMENTS:
        t0 = time.perf_counter()
        result = run_experiment(name, seeds=args.seeds)
        path = write_experiment(result, args.out_dir / name)
        status = "PASS" if result.passed else "FAIL"
        print(f"{name:<22}{status}  {time.perf_counter() - t0:6.1f} s  {result.summary}")
        print(f"{'':<22}-> {path}")


if __name__ == "__main__":
    main()
