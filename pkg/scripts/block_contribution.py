#!/usr/bin/env python3
"""Per-block residual contribution of a trained teacher across timesteps.

Writes a CSV (rows = blocks, columns = timesteps) of mean residual norms
measured on synthetic held-out clips, optionally min-max normalized per block.
Large values mean the block rewrites the hidden state at that noise level;
flat rows are candidates for skipping.
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ditslim.cli import heldout_eval_set
from ditslim.config import PipelineConfig, load_config
from ditslim.model import block_residual_norms, load_params


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("teacher", help="teacher checkpoint (.tarc)")
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--out", default="block_contribution.csv")
    parser.add_argument("--grid", type=int, default=10, help="number of timesteps")
    parser.add_argument("--samples", type=int, default=4)
    parser.add_argument("--normalize", action="store_true", help="min-max scale each block row")
    args = parser.parse_args()

    cfg = load_config(args.config) if args.config else PipelineConfig()
    teacher, _ = load_params(args.teacher)
    t_grid = [max(1, round((i + 0.5) * cfg.model.t_max / args.grid)) for i in range(args.grid)]
    samples = heldout_eval_set(cfg, n=args.samples)
    batch = [{"x0": s["x0"], "eps": s["eps"], "cond": s["cond"]} for s in samples]
    norms = block_residual_norms(teacher, batch, t_grid, normalize=args.normalize)

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block"] + [f"t_{t}" for t in t_grid])
        for i, row in enumerate(norms):
            writer.writerow([i] + [f"{v:.6g}" for v in row])
    print(f"wrote {args.out} ({norms.shape[0]} blocks x {norms.shape[1]} timesteps)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
