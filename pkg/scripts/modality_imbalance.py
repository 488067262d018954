"""Feature filling against zero-fill training under modality masking.

Partial masking drops each sample's RGB and LiDAR at the given rates;
complete masking strips both sensors from the given number of vehicles.
Each setting trains GFL4BS twice over the seeds, once with filling and once
with generation disabled, and the combined ``<out>/report.csv`` lists the
mean Top-1 of both and their difference.

    python scripts/modality_imbalance.py --out runs/modality --seeds 0 1 2
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
    p.add_argument("--rates", nargs="*", type=float, default=[0.2, 0.4, 0.6, 0.8])
    p.add_argument("--counts", nargs="*", type=int, default=[2, 4, 6, 8])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--vehicles", type=int, default=10)
    p.add_argument("--samples", type=int, default=200, help="samples per vehicle")
    p.add_argument("--rounds", type=int, default=40)
    p.add_argument("--sequential", action="store_true")
    return p.parse_args(argv)


def train_cell(args, partition: dict, generation: str, cell: Path) -> float | None:
    cfg = {
        "scenario": {"num_vehicles": args.vehicles, "samples_per_vehicle": args.samples},
        "partition": partition,
        "protocols": ["GFL4BS"],
        "rounds": desk_rounds(rounds=args.rounds, generation=generation).to_dict(),
        "seeds": args.seeds,
    }
    cell.mkdir(parents=True, exist_ok=True)
    cfg_path = cell / "experiment.json"
    cfg_path.write_text(json.dumps(cfg, indent=2))
    train = ["train", "--config", str(cfg_path), "--out", str(cell)]
    if main(train + (["--sequential"] if args.sequential else [])) != 0:
        return None
    if main(["report", str(cell), "--reference", "GFL4BS"]) != 0:
        return None
    with open(cell / "report.csv", newline="") as fh:
        return float(next(csv.DictReader(fh))["Acc_mean"])


def run(args) -> int:
    out = Path(args.out)
    settings = ([("partial", {"kind": "partial", "rate": r}, r) for r in args.rates]
                + [("complete", {"kind": "complete", "count": c}, c) for c in args.counts])
    rows = []
    for kind, partition, value in settings:
        acc = {}
        for generation in ("fill", "none"):
            acc[generation] = train_cell(args, partition, generation,
                                         out / f"{kind}-{value}" / generation)
            if acc[generation] is None:
                return 1
        rows.append((kind, value, f"{acc['fill']:.6f}", f"{acc['none']:.6f}",
                     f"{acc['fill'] - acc['none']:.6f}"))
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("masking", "value", "fill_acc_mean", "zero_fill_acc_mean", "gain"))
        w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(run(parse_args()))
