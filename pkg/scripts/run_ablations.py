#!/usr/bin/env python3
"""Run the ablation tables (T_max grid, latent dimension, architecture, initialisation).

    python scripts/run_ablations.py --kinds tmax arch init dim --seed 0 --csv-dir results/
"""

import argparse
import logging
import os

from tokenprune import pipeline as P
from tokenprune.config import load_config

TITLES = {"tmax": "score vs T_max", "dim": "score vs latent dimension",
          "arch": "attention vs mlp policy", "init": "LfD init vs scratch"}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--kinds", nargs="+", choices=sorted(TITLES), default=["tmax", "arch", "init"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config")
    ap.add_argument("--csv-dir")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    cfg = load_config(args.config).replace(seed=args.seed)
    art = P.prepare(cfg) if set(args.kinds) - {"dim"} else None
    for kind in args.kinds:
        if kind == "tmax":
            rows = P.ablation_tmax(cfg, artifacts=art)
        elif kind == "arch":
            rows = P.ablation_arch(cfg, artifacts=art)
        elif kind == "init":
            rows = P.ablation_init(cfg, artifacts=art)
        else:
            rows = P.ablation_dimension(cfg)
        print(P.format_table(TITLES[kind], rows), end="\n\n")
        if args.csv_dir:
            os.makedirs(args.csv_dir, exist_ok=True)
            with open(os.path.join(args.csv_dir, f"ablate_{kind}.csv"), "w", encoding="utf-8") as fh:
                fh.write(P.table_csv(rows) + "\n")


if __name__ == "__main__":
    main()
