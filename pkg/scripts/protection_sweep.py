#!/usr/bin/env python3
"""Sweep the temporal protection multiplier over a calibrated head report.

For each multiplier, re-runs head selection and counts retained temporal
heads per block. The count is non-decreasing in the multiplier; the sweep
shows how much protection a given pruning ratio needs before temporal heads
stop being displaced by higher-magnitude spatial ones.
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ditslim.heads import HeadReport, apply_temporal_protection, select_heads_one_kind


def load_sa_reports(path: str) -> list[HeadReport]:
    reports = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if row["kind"] != "sa":
                continue
            reports.append(
                HeadReport(
                    block=int(row["block"]),
                    head=int(row["head"]),
                    kind="sa",
                    raw_score=float(row["raw_score"]),
                    intra_ratio=float(row["intra_ratio"]) if row["intra_ratio"] else None,
                    head_type=row["type"] or None,
                )
            )
    return reports


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("report_csv", help="head_report.csv from the calibrate command")
    parser.add_argument("--ratio", type=float, default=0.3, help="head pruning ratio")
    parser.add_argument("--min-heads", type=int, default=2)
    parser.add_argument("--boosts", default="1.0,1.25,1.5,2.0")
    parser.add_argument("--out", default="protection_sweep.csv")
    args = parser.parse_args()

    base = load_sa_reports(args.report_csv)
    types = {(r.block, r.head): r.head_type for r in base}
    blocks = sorted({r.block for r in base})

    rows = []
    for boost in (float(b) for b in args.boosts.split(",")):
        reports = [
            HeadReport(block=r.block, head=r.head, kind="sa", raw_score=r.raw_score,
                       intra_ratio=r.intra_ratio, head_type=r.head_type)
            for r in base
        ]
        apply_temporal_protection(reports, boost)
        retained, k = select_heads_one_kind(reports, args.ratio, args.min_heads)
        counts = [
            sum(1 for j in blk if types[(b, j)] == "temporal")
            for b, blk in zip(blocks, retained)
        ]
        rows.append([boost, k] + counts)
        print(f"boost {boost}: K={k}, temporal retained per block {counts}")

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["boost", "k"] + [f"block_{b}" for b in blocks])
        writer.writerows(rows)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
