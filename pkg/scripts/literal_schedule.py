"""Full ramp: all 25 rounds to 90% backbone sparsity, with no early stop.

The desk setup stops the ramp at 50% backbone sparsity. This script runs the ramp to its end on
the same model, to show how far recall falls at the most aggressive settings.

    python3 scripts/literal_schedule.py --seeds 0 1 2 --out runs/literal
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

from vprprune import experiment as exp


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--out", default="runs/literal")
    args = p.parse_args()

    for seed in args.seeds:
        t0 = time.perf_counter()
        cfg = exp.desk_config(seed)
        cfg.schedule.stop_sparsity = 0.0
        ds = exp.make_dataset(cfg)
        dense, _ = exp.train_dense(cfg, ds)
        res = exp.prune_sweep(cfg, dense, ds, args.gamma, out_dir=Path(args.out) / f"seed{seed}", timing=False)
        d, f = res.reports[0], res.reports[-1]
        mid = next(r for r in res.reports if r.backbone_sparsity >= 0.5 - 1e-9)
        print(f"seed {seed}: dense R@1 {d.recall_at_1:.3f} | s_b={mid.backbone_sparsity:.3f} R@1 {mid.recall_at_1:.3f} "
              f"| s_b={f.backbone_sparsity:.3f} (dim {f.descriptor_dim}) R@1 {f.recall_at_1:.3f} "
              f"| {time.perf_counter() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
