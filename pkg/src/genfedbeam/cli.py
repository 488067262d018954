"""Command-line front end: ``gen``, ``partition``, ``train`` and ``report``.

Exit codes: 0 success, 1 configuration or input problem, 2 training diverged.
The default output root comes from ``$GENFEDBEAM_OUT`` when set, otherwise
from the config's ``out`` field.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import save_dataset
from .errors import (ConfigurationError, DivergenceError, InputError, LoadError,
                     ProtocolError)
from .experiment import ExperimentConfig, PartitionSpec, run_cell
from .fileio import read_json, write_json
from .imbalance import (imbalance_report, make_label_imbalanced_partition,
                        make_modality_masked_partition, partition_manifest)
from .scenario import dataset_manifest, generate_scenario, load_external_dataset

OUT_ENV = "GENFEDBEAM_OUT"
REPORT_HEADER = ("protocol", "seeds", "Acc_mean", "Acc_std", "Com_mean", "Com_std",
                 "Var_mean", "Var_std", "transferred_mean", "overhead_ratio")

log = logging.getLogger("genfedbeam")


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigurationError(f"bad config {path}: {exc}") from exc


def output_root(args, exp: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV) or exp.out)


def _writable(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigurationError(f"output directory {path} is not writable")
    return path


# ---------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    exp = load_config(args.config)
    seed = exp.scenario_seed if args.seed is None else args.seed
    out = _writable(output_root(args, exp))
    scen = generate_scenario(exp.scenario, seed)
    save_dataset(out, scen.vehicles, dataset_manifest(exp.scenario, seed))
    rep = imbalance_report(scen.vehicles, exp.scenario.num_beams)
    print(f"V={len(scen.vehicles)} M={exp.scenario.num_beams} samples={rep['samples']} "
          f"zeta={rep['zeta']:.4f} epsilon={rep['epsilon']:.4f}")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------- partition

def cmd_partition(args) -> int:
    exp = load_config(args.config)
    spec = exp.partition
    overrides = {k: getattr(args, k) for k in ("kind", "level", "rate", "count")
                 if getattr(args, k) is not None}
    if overrides:
        spec = PartitionSpec(**{**spec.__dict__, **overrides})
    seed = exp.seeds[0] if args.seed is None else args.seed
    vehicles, manifest = load_external_dataset(args.dataset)
    m = manifest["num_beams"]
    removed = None
    if spec.kind == "label":
        vehicles, removed = make_label_imbalanced_partition(vehicles, spec.level, seed, m,
                                                            spec.top_prob)
    elif spec.kind in ("partial", "complete"):
        value = spec.rate if spec.kind == "partial" else spec.count
        vehicles = make_modality_masked_partition(vehicles, spec.kind, value, seed)
    rep = imbalance_report(vehicles, m)
    out = _writable(output_root(args, exp))
    extra = {"spec": spec.__dict__, "seed": seed, "report": rep, "removed": removed}
    write_json(out / "partition.json", partition_manifest(vehicles, extra))
    print(f"partition {spec.kind} seed={seed}: V={len(vehicles)} samples={rep['samples']} "
          f"zeta={rep['zeta']:.4f} epsilon={rep['epsilon']:.4f}")
    for v, (k, n) in enumerate(zip(rep["kappa"], rep["per_vehicle"])):
        print(f"  vehicle {v}: n={n} kappa gps={k[0]:.3f} rgb={k[1]:.3f} lidar={k[2]:.3f}")
    return 0


# ---------------------------------------------------------------- train

def _run_seed(exp_dict: dict, protocols: tuple, seed: int, out: str) -> list[dict]:
    """All protocol cells for one seed; FedAvg runs first so GFL4BS can reuse
    it as its evaluation model."""
    exp = ExperimentConfig.from_dict(exp_dict)
    order = sorted(protocols, key=lambda p: p != "FedAvg")
    cache: dict = {}
    rows = []
    for protocol in order:
        res = run_cell(exp, protocol, seed, Path(out), eval_cache=cache)
        rep = res.report
        rows.append({"protocol": protocol, "seed": seed, "Com": rep.sum_rate_ratio,
                     "Acc": rep.global_acc, "Var": rep.local_variance,
                     "transferred": res.ledger.total})
    return rows


def summary_table(rows: list[dict], protocols) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("protocol", "seeds", "Com", "Acc", "Var", "transferred"))
    for p in protocols:
        sel = [r for r in rows if r["protocol"] == p]
        w.writerow((p, len(sel), f"{np.mean([r['Com'] for r in sel]):.6f}",
                    f"{np.mean([r['Acc'] for r in sel]):.6f}",
                    f"{np.mean([r['Var'] for r in sel]):.8f}",
                    int(np.mean([r["transferred"] for r in sel]))))
    return buf.getvalue()


def cmd_train(args) -> int:
    exp = load_config(args.config)
    if args.seed is not None:
        exp = ExperimentConfig.from_dict({**exp.to_dict(), "seeds": args.seed})
    if args.protocol:
        exp = ExperimentConfig.from_dict({**exp.to_dict(), "protocols": args.protocol})
    out = _writable(output_root(args, exp))
    write_json(out / "config.json", exp.to_dict())
    jobs = [(exp.to_dict(), exp.protocols, s, str(out)) for s in exp.seeds]
    if args.sequential or len(jobs) == 1:
        results = [_run_seed(*j) for j in jobs]
    else:
        workers = min(len(jobs), args.workers or os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed, *zip(*jobs)))
    rows = [r for rs in results for r in rs]
    table = summary_table(rows, exp.protocols)
    (out / "summary.csv").write_text(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------- report

def collect_summaries(run_dirs) -> list[dict]:
    found = []
    for d in run_dirs:
        d = Path(d)
        if not d.exists():
            raise ConfigurationError(f"run directory {d} does not exist")
        found.extend(read_json(p) for p in sorted(d.glob("*/seed*/summary.json")))
        if (d / "summary.json").exists():
            found.append(read_json(d / "summary.json"))
    if not found:
        raise ConfigurationError(f"no finished runs under {', '.join(map(str, run_dirs))}")
    return found


def report_rows(summaries: list[dict], reference: str = "FLASH") -> list[dict]:
    protocols = list(dict.fromkeys(s["protocol"] for s in summaries))
    if reference not in protocols:
        raise ConfigurationError(f"reference protocol {reference} has no runs")
    ref_total = np.mean([s["transferred"] for s in summaries if s["protocol"] == reference])
    rows = []
    for p in protocols:
        sel = [s for s in summaries if s["protocol"] == p]
        row = {"protocol": p, "seeds": len(sel)}
        for key in ("Acc", "Com", "Var"):
            vals = np.array([s[key] for s in sel], dtype=np.float64)
            row[f"{key}_mean"], row[f"{key}_std"] = float(vals.mean()), float(vals.std())
        row["transferred_mean"] = float(np.mean([s["transferred"] for s in sel]))
        row["overhead_ratio"] = row["transferred_mean"] / ref_total
        rows.append(row)
    return rows


def series_rows(run_dirs) -> list[tuple]:
    """Per protocol and round: mean global accuracy over seeds (plot data)."""
    from .experiment import read_metrics
    acc: dict = {}
    for d in run_dirs:
        for path in sorted(Path(d).glob("*/seed*/metrics.csv")):
            protocol = path.parent.parent.name
            for r in read_metrics(path):
                acc.setdefault((protocol, int(r["round"])), []).append(float(r["global_acc"]))
    return [(p, rnd, f"{np.mean(v):.6f}", len(v)) for (p, rnd), v in sorted(acc.items())]


def cmd_report(args) -> int:
    rows = report_rows(collect_summaries(args.runs), args.reference)
    out = _writable(Path(args.out) if args.out else Path(args.runs[0]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow([r["protocol"], r["seeds"]] + [f"{r[k]:.6f}" for k in REPORT_HEADER[2:]])
    (out / "report.csv").write_text(buf.getvalue())
    sbuf = io.StringIO()
    sw = csv.writer(sbuf, lineterminator="\n")
    sw.writerow(("protocol", "round", "global_acc_mean", "seeds"))
    sw.writerows(series_rows(args.runs))
    (out / "series.csv").write_text(sbuf.getvalue())
    print(buf.getvalue(), end="")
    return 0


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genfedbeam",
                                     description="Generative federated beam-selection simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds_many=False):
        p.add_argument("--config", help="experiment config (JSON)")
        if seeds_many:
            p.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
        else:
            p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or config 'out')")

    g = sub.add_parser("gen", help="generate a scenario dataset")
    common(g)
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("partition", help="apply an imbalance partition and report metrics")
    common(p)
    p.add_argument("--dataset", required=True, help="directory written by 'gen'")
    p.add_argument("--kind", choices=("none", "label", "partial", "complete"))
    p.add_argument("--level", choices=("L", "M", "H"))
    p.add_argument("--rate", type=float)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_partition)

    t = sub.add_parser("train", help="run every (protocol, seed) cell")
    common(t, seeds_many=True)
    t.add_argument("--protocol", action="append", help="protocol to run (repeatable)")
    t.add_argument("--sequential", action="store_true", help="single process, fully deterministic")
    t.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="aggregate finished runs into comparison tables")
    r.add_argument("runs", nargs="+", help="output directories of 'train'")
    r.add_argument("--reference", default="FLASH", help="protocol for the overhead ratio")
    r.add_argument("--out", help="where to write report.csv and series.csv")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, InputError, LoadError, ProtocolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
