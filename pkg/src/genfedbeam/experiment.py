"""Experiment plumbing: partition specs, task preparation, config files and
per-cell runs with their output files."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .beam_model import ArchConfig, save_checkpoint
from .data import VehicleDataset, split_local
from .errors import ConfigurationError
from .federation import PROTOCOLS, FederatedTask, RoundConfig, TrainResult, run_training
from .fileio import write_json
from .imbalance import (LEVEL_REMOVALS, imbalance_report,
                        make_label_imbalanced_partition, make_modality_masked_partition)
from .scenario import ScenarioConfig, dft_codebook, generate_scenario, rx_cell, tx_cell

METRICS_HEADER = ("round", "global_acc", "mean_local_acc", "local_var", "delta_loss",
                  "triggered", "params_up", "params_down")
SUMMARY_HEADER = ("protocol", "seed", "Com", "Acc", "Var", "transferred")


@dataclass
class PartitionSpec:
    """``kind``: ``none``, ``label`` (uses ``level``), ``partial`` (uses
    ``rate``) or ``complete`` (uses ``count``)."""

    kind: str = "none"
    level: str = "H"
    rate: float = 0.8
    count: int = 2
    top_prob: float = 0.7

    def __post_init__(self):
        if self.kind not in ("none", "label", "partial", "complete"):
            raise ConfigurationError(f"unknown partition kind {self.kind!r}")
        if self.kind == "label" and self.level not in LEVEL_REMOVALS:
            raise ConfigurationError(f"unknown imbalance level {self.level!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigurationError("masking rate must lie in [0, 1]")
        if self.count < 0:
            raise ConfigurationError("vehicle count must be non-negative")

    @property
    def default_generation(self) -> str:
        return {"label": "labels", "partial": "fill", "complete": "fill"}.get(self.kind, "labels")


def valid_rx_cells(cfg: ScenarioConfig) -> np.ndarray:
    """Every ground-level LiDAR cell a vehicle can occupy."""
    nh, nr, nl = cfg.lidar_shape
    cells = {rx_cell(np.array([x, y]), cfg)
             for x in np.linspace(-cfg.half_width, cfg.half_width, 4 * nl)
             for y in np.linspace(0.0, cfg.depth, 4 * nr)
             if cfg.min_distance <= np.hypot(x, y) <= cfg.max_distance}
    cells.discard(tx_cell(cfg))
    return np.array(sorted(cells), dtype=np.int64)


def prepare_task(vehicles: list[VehicleDataset], cfg: ScenarioConfig, spec: PartitionSpec,
                 seed: int) -> tuple[FederatedTask, dict]:
    """Partition, split 80/10/10 and mask. Modality masks touch only the
    local train and validation parts; the pooled test keeps every modality."""
    if spec.kind == "label":
        vehicles, _ = make_label_imbalanced_partition(vehicles, spec.level, seed, cfg.num_beams,
                                                      spec.top_prob)
    splits = [split_local(ds, np.random.default_rng([seed, v])) for v, ds in enumerate(vehicles)]
    train = [s[0] for s in splits]
    val = [s[1] for s in splits]
    if spec.kind in ("partial", "complete"):
        combined = [VehicleDataset.concat([t, v]) for t, v in zip(train, val)]
        value = spec.rate if spec.kind == "partial" else spec.count
        masked = make_modality_masked_partition(combined, spec.kind, value, seed)
        train = [m.subset(np.arange(len(t))) for m, t in zip(masked, train)]
        val = [m.subset(np.arange(len(t), len(m))) for m, t in zip(masked, train)]
    test = VehicleDataset.concat([s[2] for s in splits])
    task = FederatedTask(train, val, test, cfg, dft_codebook(cfg.num_antennas, cfg.num_beams),
                         tx_cell(cfg), valid_rx_cells(cfg))
    return task, imbalance_report(train, cfg.num_beams)


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    protocols: tuple = ("GFL4BS", "FedAvg", "FLASH", "CL")
    rounds: RoundConfig = field(default_factory=RoundConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    seeds: tuple = (0,)
    scenario_seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        if isinstance(self.scenario, dict):
            self.scenario = ScenarioConfig.from_dict(self.scenario)
        if isinstance(self.partition, dict):
            self.partition = PartitionSpec(**self.partition)
        if isinstance(self.rounds, dict):
            self.rounds = RoundConfig.from_dict(self.rounds)
        if isinstance(self.arch, dict):
            self.arch = ArchConfig.from_dict(self.arch)
        self.protocols = tuple(self.protocols)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        unknown = [p for p in self.protocols if p not in PROTOCOLS]
        if unknown or not self.protocols:
            raise ConfigurationError(f"unknown or missing protocols: {unknown}")
        if self.arch.num_beams != self.scenario.num_beams:
            raise ConfigurationError("model and scenario disagree on the codebook size")
        if self.arch.input_dim("rgb") != self.scenario.rgb_len \
                or self.arch.input_dim("lidar") != self.scenario.lidar_len:
            raise ConfigurationError("model input widths do not match the sensor shapes")

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.to_dict(), "partition": asdict(self.partition),
                "protocols": list(self.protocols), "rounds": self.rounds.to_dict(),
                "arch": self.arch.to_dict(), "seeds": list(self.seeds),
                "scenario_seed": self.scenario_seed, "out": self.out}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


def desk_rounds(**overrides) -> RoundConfig:
    """Settings small enough for a laptop: fewer rounds, larger step sizes,
    and a smaller synthetic share for label generation.

    Feature filling drops the label terms of the generator loss and matches
    BN statistics only: fills optimized towards the true label encode that
    label, and the integration branch learns to read it from the filled
    slots instead of from real features.
    """
    from .generator import GeneratorConfig
    base = dict(rounds=40, local_epochs=2, batch_size=32, lr=3e-3, gamma=0.01, gen_cap=0.5,
                generator=GeneratorConfig(epochs=100, lr=0.03, init_std=0.01))
    if overrides.get("generation") == "fill":
        base.update(gen_cap=2.0, generator=GeneratorConfig(
            epochs=100, lr=0.03, init_std=0.01, hard_weight=0.0, soft_weight=0.0))
    base.update(overrides)
    return RoundConfig(**base)


def metrics_csv(result: TrainResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in result.report.rounds:
        w.writerow([r.round, f"{r.global_acc:.6f}", f"{r.mean_local_acc:.6f}",
                    f"{r.local_var:.8f}", f"{r.delta_loss:.8f}", int(r.triggered),
                    r.params_up, r.params_down])
    return buf.getvalue()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0]) != METRICS_HEADER:
        raise ConfigurationError(f"{path} does not have the metrics header")
    return rows


def write_run(cell_dir: Path, result: TrainResult, meta: dict) -> None:
    cell_dir.mkdir(parents=True, exist_ok=True)
    (cell_dir / "metrics.csv").write_text(metrics_csv(result))
    rep = result.report
    summary = {**meta, "protocol": rep.protocol, "Com": rep.sum_rate_ratio,
               "Acc": rep.global_acc, "Var": rep.local_variance,
               "local_accuracies": rep.local_accuracies,
               "transferred": result.ledger.total, "transferred_up": result.ledger.total_up,
               "transferred_down": result.ledger.total_down,
               "selected_branches": rep.selected_branches, "completed": rep.completed}
    write_json(cell_dir / "summary.json", summary)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("round", "vehicle", "up", "down"))
    for e in result.ledger.entries:
        w.writerow((e.round, e.vehicle, e.up, e.down))
    (cell_dir / "ledger.csv").write_text(buf.getvalue())
    save_checkpoint(cell_dir / "model.npz", result.model, {"protocol": rep.protocol})


def run_cell(exp: ExperimentConfig, protocol: str, seed: int, out_dir: Path,
             task: FederatedTask | None = None, eval_cache: dict | None = None,
             halt_after: int | None = None) -> TrainResult:
    """Run one (protocol, seed) cell and write its files under
    ``out_dir/<protocol>/seed<seed>``."""
    if task is None:
        scen = generate_scenario(exp.scenario, exp.scenario_seed)
        task, _ = prepare_task(scen.vehicles, exp.scenario, exp.partition, seed)
    cfg = RoundConfig.from_dict({**exp.rounds.to_dict(), "seed": seed})
    cell_dir = Path(out_dir) / protocol / f"seed{seed}"
    eval_net = None
    if protocol == "GFL4BS" and cfg.generation != "none":
        key = ("FedAvg", seed)
        if eval_cache is not None and key in eval_cache:
            eval_net = eval_cache[key]
        else:
            eval_net = run_training(task, "FedAvg", cfg, exp.arch).model
            if eval_cache is not None:
                eval_cache[key] = eval_net
    result = run_training(task, protocol, cfg, exp.arch, eval_net=eval_net,
                          state_path=cell_dir / "state.pkl", halt_after=halt_after)
    if protocol == "FedAvg" and eval_cache is not None and result.report.completed:
        eval_cache[("FedAvg", seed)] = result.model
    if result.report.completed:
        write_run(cell_dir, result, {"seed": seed})
    return result
