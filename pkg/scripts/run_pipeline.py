#!/usr/bin/env python3
"""Run the whole compression pipeline into one output directory.

Stages: teach -> calibrate -> prune -> train stage 1 -> train stage 2 ->
report. Every artifact lands under --out-root; pass --config to override the
desk-scale defaults. Finishes in a few minutes on a laptop CPU.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ditslim import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--out-root", default="runs/pipeline", help="output directory")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VAL")
    args = parser.parse_args()

    base = []
    if args.config:
        base += ["--config", args.config]
    base += ["--out-root", args.out_root]
    if args.force:
        base += ["--force"]
    for item in args.set:
        base += ["--set", item]

    for command in (
        ["teach"],
        ["calibrate"],
        ["prune"],
        ["train", "--stage", "1"],
        ["train", "--stage", "2"],
        ["report"],
    ):
        print(f"== {' '.join(command)}")
        code = cli.main(base + command)
        if code != 0:
            print(f"stopped: {' '.join(command)} exited {code}", file=sys.stderr)
            return code

    summary = json.loads((Path(args.out_root) / "report" / "summary.json").read_text())
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
