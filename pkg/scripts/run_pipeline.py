#!/usr/bin/env python3
"""Train the full pipeline on one or more seeds and report scores at retention 1/3.

    python scripts/run_pipeline.py --seeds 0 1 2 3 4 [--config my.cfg]
"""

import argparse
import logging
import time

from tokenprune.config import load_config
from tokenprune.pipeline import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--config")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    base = load_config(args.config)
    print("seed  policy  random  heuristic  retention  agreement  seconds")
    for seed in args.seeds:
        t0 = time.perf_counter()
        r = run_pipeline(base.replace(seed=seed))
        print(f"{seed:4d}  {r.policy_score:6.4f}  {r.random_score:6.4f}  {r.heuristic_score:9.4f}  "
              f"{r.retention_rate:9.4f}  {r.pretrain_agreement:9.4f}  {time.perf_counter() - t0:7.0f}")


if __name__ == "__main__":
    main()
