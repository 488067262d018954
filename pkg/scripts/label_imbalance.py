"""Compare GFL4BS, FedAvg, FLASH and CL on label-imbalanced partitions.

For every level this trains all four protocols over the given seeds with
the desk preset, then writes ``<out>/level-<L>/report.csv`` and a combined
``<out>/report.csv`` with one row per (level, protocol).

    python scripts/label_imbalance.py --out runs/label --seeds 0 1 2
"""
import argparse
import csv
import json
import sys
from pathlib import Path

from genfedbeam.cli import main
from genfedbeam.experiment import desk_rounds


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--levels", nargs="+", default=["L", "M", "H"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--vehicles", type=int, default=10)
    p.add_argument("--samples", type=int, default=200, help="samples per vehicle")
    p.add_argument("--rounds", type=int, default=40)
    p.add_argument("--sequential", action="store_true")
    return p.parse_args(argv)


def run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    combined = []
    for level in args.levels:
        cell = out / f"level-{level}"
        cfg = {
            "scenario": {"num_vehicles": args.vehicles, "samples_per_vehicle": args.samples},
            "partition": {"kind": "label", "level": level},
            "protocols": ["GFL4BS", "FedAvg", "FLASH", "CL"],
            "rounds": desk_rounds(rounds=args.rounds).to_dict(),
            "seeds": args.seeds,
        }
        cfg_path = out / f"level-{level}.json"
        cfg_path.write_text(json.dumps(cfg, indent=2))
        train = ["train", "--config", str(cfg_path), "--out", str(cell)]
        if main(train + (["--sequential"] if args.sequential else [])) != 0:
            return 1
        if main(["report", str(cell), "--reference", "FLASH"]) != 0:
            return 1
        with open(cell / "report.csv", newline="") as fh:
            combined.extend({"level": level, **row} for row in csv.DictReader(fh))
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(combined[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(combined)
    return 0


if __name__ == "__main__":
    sys.exit(run(parse_args()))
