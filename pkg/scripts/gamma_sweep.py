"""Aggregator-rate sweep: one trade-off CSV per gamma from a single dense model.

    python3 scripts/gamma_sweep.py --config configs/desk.ini --out runs/gamma
"""
from __future__ import annotations

import argparse
from pathlib import Path

from vprprune import experiment as exp
from vprprune.config import load_config


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="experiment .ini (default: the built-in desk setup)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gammas", type=float, nargs="+", help="override schedule.gammas")
    p.add_argument("--architecture", help="override experiment.architecture")
    p.add_argument("--out", default="runs/gamma")
    args = p.parse_args()

    cfg = load_config(args.config) if args.config else exp.desk_config(args.seed)
    cfg.experiment.seed = args.seed
    if args.architecture:
        cfg.experiment.architecture = args.architecture
        cfg.validate()
    ds = exp.make_dataset(cfg)
    dense, _ = exp.train_dense(cfg, ds)
    print("gamma  dim  map_mib     param_count  recall@1  recall@5  csv")
    for g in args.gammas or cfg.schedule.gammas:
        res = exp.prune_sweep(cfg, dense, ds, g, out_dir=Path(args.out))
        r = res.reports[-1]
        print(f"{g:<5.2f}  {r.descriptor_dim:<4d} {r.map_mib:<11.6f} {r.param_count:<12d} "
              f"{r.recall_at_1:<9.3f} {r.recall_at_5:<9.3f} {res.csv_path}", flush=True)


if __name__ == "__main__":
    main()
