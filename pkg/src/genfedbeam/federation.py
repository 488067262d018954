"""Federated training loop, benchmark protocols and communication ledger.

Protocols:

``GFL4BS``  each vehicle receives and returns only the integration branch
            plus the extractors of modalities it senses; extractors are
            averaged over their owners, the integration branch over every
            vehicle. When the validation-loss trigger fires, vehicles
            synthesize samples for their missing labels (``generation =
            "labels"``) or features for their missing modalities
            (``generation = "fill"``).
``FedAvg``  full-model exchange, uniform average, no generation.
``FLASH``   full model in the first round; afterwards the BS returns only the
            integration branch and the single extractor with the best solo
            validation accuracy.
``CL``      all raw training data uploaded once and trained centrally.

Averaging is uniform over participating vehicles. Every random draw comes
from a generator seeded by ``(seed, round, vehicle)``, so results do not
depend on execution order and a resumed run continues identically.
"""
from __future__ import annotations

import logging
import math
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Network, adam_step, one_hot, softmax_cross_entropy
from .beam_model import (BRANCHES, INTEGRATION, MODALITIES, ArchConfig, MultiModalNet,
                         branch_parameter_counts, build_model, model_backward, model_forward)
from .data import VehicleDataset
from .errors import ConfigurationError, DivergenceError, InputError, ProtocolError
from .generator import GeneratorConfig, fill_missing_modality, synthesize
from .imbalance import sample_shortfall
from .scenario import ScenarioConfig, rate_ratio

log = logging.getLogger(__name__)

PROTOCOLS = ("GFL4BS", "FedAvg", "FLASH", "CL")
GENERATION_MODES = ("labels", "fill", "none")
STATE_VERSION = 2


@dataclass
class RoundConfig:
    rounds: int = 500
    local_epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-4
    gamma: float = 0.01
    # "decline": generate when the loss drop exceeds gamma; "stall": when it
    # falls short of gamma
    trigger_on: str = "decline"
    generation: str = "labels"
    gen_cap: float = 2.0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    cl_epochs: int | None = None
    users_per_drop: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig.from_dict(self.generator)
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigurationError("rounds and local epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.trigger_on not in ("decline", "stall"):
            raise ConfigurationError(f"unknown trigger direction {self.trigger_on!r}")
        if self.generation not in GENERATION_MODES:
            raise ConfigurationError(f"unknown generation mode {self.generation!r}")

    @property
    def central_epochs(self) -> int:
        return self.cl_epochs if self.cl_epochs is not None else self.rounds * self.local_epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator"] = self.generator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundConfig":
        return cls(**d)


@dataclass
class FederatedTask:
    """Everything a protocol run needs: per-vehicle local train and
    validation splits, the pooled global test set and the radio setup."""

    train: list[VehicleDataset]
    val: list[VehicleDataset]
    test: VehicleDataset
    scenario: ScenarioConfig
    codebook: np.ndarray
    tx_cell: int
    rx_cells: np.ndarray

    @property
    def num_vehicles(self) -> int:
        return len(self.train)


@dataclass
class VehicleState:
    vid: int
    modalities: frozenset
    train: VehicleDataset
    val: VehicleDataset
    synthetic: VehicleDataset | None = None

    def held_branches(self) -> tuple:
        return tuple(q.value for q in MODALITIES if q.value in self.modalities) + (INTEGRATION,)

    def data_mix(self) -> VehicleDataset:
        if self.synthetic is None or len(self.synthetic) == 0:
            return self.train
        return VehicleDataset.concat([self.train, self.synthetic])


@dataclass
class LedgerEntry:
    round: int
    vehicle: int
    up: int
    down: int


@dataclass
class CommLedger:
    """Transferred values (parameters, or raw data values for CL)."""

    entries: list = field(default_factory=list)

    def record(self, rnd: int, vehicle: int, up: int, down: int) -> None:
        self.entries.append(LedgerEntry(rnd, vehicle, int(up), int(down)))

    def round_totals(self, rnd: int) -> tuple[int, int]:
        rows = [e for e in self.entries if e.round == rnd]
        return sum(e.up for e in rows), sum(e.down for e in rows)

    @property
    def total_up(self) -> int:
        return sum(e.up for e in self.entries)

    @property
    def total_down(self) -> int:
        return sum(e.down for e in self.entries)

    @property
    def total(self) -> int:
        return self.total_up + self.total_down

    def overhead_ratio(self, reference: "CommLedger") -> float:
        return self.total / reference.total

    def rows(self) -> list[dict]:
        return [asdict(e) for e in self.entries]


@dataclass
class RoundMetrics:
    round: int
    global_acc: float
    mean_local_acc: float
    local_var: float
    delta_loss: float
    triggered: bool
    params_up: int
    params_down: int


@dataclass
class TrainReport:
    protocol: str
    rounds: list = field(default_factory=list)
    loss_history: list = field(default_factory=list)
    local_accuracies: list = field(default_factory=list)
    selected_branches: list = field(default_factory=list)
    sum_rate_ratio: float = float("nan")
    completed: bool = False

    @property
    def global_acc(self) -> float:
        return self.rounds[-1].global_acc if self.rounds else float("nan")

    @property
    def local_variance(self) -> float:
        return population_variance(self.local_accuracies)


@dataclass
class TrainResult:
    report: TrainReport
    ledger: CommLedger
    model: MultiModalNet


def population_variance(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.mean((v - v.mean()) ** 2)) if v.size else float("nan")


def generation_trigger(losses, gamma: float, trigger_on: str = "decline") -> bool:
    """Decide from the BS loss history whether vehicles generate this round."""
    if len(losses) < 2:
        return False
    delta = losses[-2] - losses[-1]
    return bool(delta > gamma) if trigger_on == "decline" else bool(delta < gamma)


def vehicle_rng(seed: int, rnd: int, vehicle: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rnd, vehicle]))


# ---------------------------------------------------------------- local work

def flat_parameters(net: MultiModalNet, branches) -> dict[str, np.ndarray]:
    return {f"{b}/{k}": v for b in branches for k, v in net.branches[b].parameters().items()}


def local_update(net: MultiModalNet, data: VehicleDataset, held, cfg: RoundConfig,
                 rng: np.random.Generator, gps_scale: float) -> float | None:
    """Train ``net``'s held branches in place for ``cfg.local_epochs``
    epochs of mini-batch Adam on softmax cross-entropy. Returns the mean
    loss of the last epoch, or None when there is no data."""
    n = len(data)
    if n == 0:
        log.warning("local update skipped: empty data mix")
        return None
    held = [b for b in held if b in net.branches]
    inp = data.to_model_input(gps_scale)
    if not (np.isfinite(inp.gps).all() and np.isfinite(inp.rgb).all()):
        raise InputError("non-finite values in local training data")
    targets = one_hot(data.labels, net.arch.num_beams)
    params = flat_parameters(net, held)
    opt = AdamState(lr=cfg.lr)
    n_batches = math.ceil(n / cfg.batch_size)
    last = 0.0
    for _ in range(cfg.local_epochs):
        losses = []
        for idx in np.array_split(rng.permutation(n), n_batches):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    logits, trace = model_forward(net, inp.subset(idx), mode="train",
                                                  update_stats=True, held=held)
            except InputError as exc:
                # the raw data was checked above, so this is an overflowed activation
                raise DivergenceError(f"non-finite activations: {exc}") from exc
            loss, grad = softmax_cross_entropy(logits, targets[idx])
            if not np.isfinite(loss):
                raise DivergenceError("non-finite training loss")
            sets = model_backward(net, trace, grad)
            grads = {f"{b}/{k}": g for b, s in sets.items() for k, g in s.params.items()}
            adam_step(params, grads, opt)
            losses.append(loss)
        last = float(np.mean(losses))
    return last


def evaluate(net: MultiModalNet, data: VehicleDataset, gps_scale: float, held=None):
    """``(top-1 accuracy, mean cross-entropy)`` of ``net`` on ``data``."""
    if len(data) == 0:
        return float("nan"), float("nan")
    logits, _ = model_forward(net, data.to_model_input(gps_scale), mode="eval",
                              update_stats=False, held=held)
    loss, _ = softmax_cross_entropy(logits, one_hot(data.labels, net.arch.num_beams))
    acc = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return acc, loss


# ---------------------------------------------------------------- aggregation

def average_networks(nets: list[Network]) -> Network:
    """Uniform average of parameters and BN running statistics."""
    out = nets[0].copy()
    arrays = [n.state_arrays() for n in nets]
    out.load_state_arrays({k: np.mean(np.stack([a[k] for a in arrays]), axis=0)
                           for k in arrays[0]})
    return out


def fedavg(models: list[MultiModalNet]) -> MultiModalNet:
    """Plain full-model uniform average."""
    first = models[0]
    return MultiModalNet(first.arch, {b: average_networks([m.branches[b] for m in models])
                                      for b in first.branches})


def aggregate(previous: MultiModalNet, uploads: list[dict[str, Network]],
              expected=BRANCHES) -> MultiModalNet:
    """Branch-wise average: each branch over the vehicles that uploaded it.
    A branch nobody uploaded keeps its previous value (with a warning if it
    is among ``expected``)."""
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    if not any(INTEGRATION in u for u in uploads):
        raise ProtocolError("no vehicle uploaded the integration branch")
    branches = {}
    for b in BRANCHES:
        owners = [u[b] for u in uploads if b in u]
        if owners:
            branches[b] = average_networks(owners)
        else:
            if b in expected:
                log.warning("branch %s had no uploads this round; keeping previous", b)
            branches[b] = previous.branches[b].copy()
    return MultiModalNet(previous.arch, branches)


# ---------------------------------------------------------------- accounting

def branch_transfer(arch: ArchConfig, branches) -> int:
    counts = branch_parameter_counts(arch)
    return sum(counts[b] for b in branches)


def raw_data_values(data: VehicleDataset) -> int:
    """Values a vehicle uploads to share its raw training data (sensor
    values of observed modalities plus one label per sample)."""
    widths = np.array([data.gps.shape[1], data.rgb.shape[1], data.lidar.shape[1]])
    return int((data.mask.astype(np.int64) @ widths).sum() + len(data))


def expected_round_transfer(protocol: str, arch: ArchConfig, modalities, rnd: int,
                            selected: str | None = None) -> int:
    """Closed-form per-direction parameter count one vehicle moves in a round."""
    if protocol == "FedAvg" or (protocol == "FLASH" and rnd == 1):
        return branch_transfer(arch, BRANCHES)
    if protocol == "FLASH":
        return branch_transfer(arch, (selected, INTEGRATION))
    if protocol == "GFL4BS":
        own = tuple(q.value for q in MODALITIES if q.value in modalities)
        return branch_transfer(arch, own + (INTEGRATION,))
    raise ProtocolError(f"no per-round model transfer for {protocol}")


# ---------------------------------------------------------------- generation

def shortfall_targets(data: VehicleDataset, num_beams: int, cap: int) -> np.ndarray:
    """Labels to synthesize: the per-label shortfall, scaled down
    proportionally when it exceeds ``cap`` samples."""
    if len(data) == 0:
        return np.zeros(0, dtype=np.int64)
    need = sample_shortfall(data.label_counts(num_beams))
    total = int(need.sum())
    if total > cap:
        need = np.floor(need * (cap / total)).astype(np.int64)
    return np.repeat(np.arange(num_beams), need)


def synthetic_dataset(result, gps_scale: float, num_antennas: int) -> VehicleDataset:
    n = result.labels.shape[0]
    return VehicleDataset(
        ids=np.full(n, -1, dtype=np.int64), gps=result.gps * gps_scale, rgb=result.rgb,
        lidar=result.lidar.astype(np.int8), labels=result.labels,
        mask=np.ones((n, 3), dtype=bool), synthetic=np.ones(n, dtype=bool),
        channels=np.zeros((n, num_antennas), dtype=np.complex128))


def generate_for_vehicle(vehicle: VehicleState, local: MultiModalNet,
                         eval_net: MultiModalNet | None, task: FederatedTask,
                         cfg: RoundConfig, rng: np.random.Generator) -> None:
    scale = task.scenario.gps_scale
    if cfg.generation == "labels":
        if any(q.value not in local.branches for q in MODALITIES):
            log.warning("vehicle %d lacks modalities; label generation skipped", vehicle.vid)
            return
        targets = shortfall_targets(vehicle.train, local.arch.num_beams,
                                    int(cfg.gen_cap * len(vehicle.train)))
        if targets.size < 2:
            return
        result = synthesize(local, eval_net, targets, cfg.generator, rng, task.tx_cell,
                            task.rx_cells)
        vehicle.synthetic = synthetic_dataset(result, scale, task.scenario.num_antennas)
    elif cfg.generation == "fill":
        # filled copies of incomplete samples join the originals, which keep
        # their zero-filled slots
        train = vehicle.train
        rows = np.flatnonzero(~train.mask.all(axis=1))
        cap = int(cfg.gen_cap * len(train))
        if rows.size > cap:
            rows = np.sort(rng.choice(rows, size=cap, replace=False))
        if len(train) < 2 or rows.size == 0:
            return
        filled = fill_missing_modality(local, eval_net, train.to_model_input(scale),
                                       train.labels, cfg.generator)
        copies = train.subset(rows)
        copies.fill, copies.fill_mask = filled.fill[rows], filled.fill_mask[rows]
        copies.synthetic[:] = True
        vehicle.synthetic = copies


# ---------------------------------------------------------------- driver

def _held_for_eval(protocol: str, selected: str | None):
    if protocol == "FLASH" and selected is not None:
        return (selected, INTEGRATION)
    return None


def _record_metrics(report: TrainReport, rnd: int, net: MultiModalNet, task: FederatedTask,
                    held, delta: float, triggered: bool, ledger: CommLedger) -> None:
    scale = task.scenario.gps_scale
    acc, _ = evaluate(net, task.test, scale, held)
    local = [evaluate(net, v, scale, held)[0] for v in task.val]
    report.local_accuracies = local
    up, down = ledger.round_totals(rnd)
    report.rounds.append(RoundMetrics(rnd, acc, float(np.mean(local)),
                                      population_variance(local), delta, triggered, up, down))


def _finish(report: TrainReport, net: MultiModalNet, task: FederatedTask, cfg: RoundConfig,
            held) -> None:
    from .beam_model import predict
    _, chosen = predict(net, task.test.to_model_input(task.scenario.gps_scale), held=held)
    report.sum_rate_ratio = rate_ratio(task.test.channels, chosen, task.codebook,
                                       task.scenario.power, task.scenario.noise_power,
                                       cfg.users_per_drop)
    report.completed = True


def _load_state(path: Path | None, fingerprint: dict):
    if path is None or not path.exists():
        return None
    with open(path, "rb") as fh:
        state = pickle.load(fh)
    if state.get("version") != STATE_VERSION or state.get("fingerprint") != fingerprint:
        raise ConfigurationError(f"run state at {path} belongs to a different run")
    return state


def _save_state(path: Path | None, state: dict) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(state, fh)
    tmp.replace(path)


def select_flash_branch(net: MultiModalNet, task: FederatedTask, vehicles) -> str:
    """Extractor whose solo accuracy on the pooled validation splits is best."""
    pooled = VehicleDataset.concat([v.val for v in vehicles])
    scores = [(evaluate(net, pooled, task.scenario.gps_scale, (q.value, INTEGRATION))[0], q.value)
              for q in MODALITIES]
    best = max(s for s, _ in scores)
    return next(name for s, name in scores if s == best)


def run_training(task: FederatedTask, protocol: str, cfg: RoundConfig, arch: ArchConfig,
                 eval_net: MultiModalNet | None = None, state_path: str | Path | None = None,
                 halt_after: int | None = None) -> TrainResult:
    """Run one protocol for ``cfg.rounds`` rounds.

    ``state_path``: run state is saved there after every round and picked up
    again if present. ``halt_after``: stop after that many rounds in this
    call (the report is then marked incomplete).
    """
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"unknown protocol {protocol!r}")
    if protocol == "CL":
        return _run_central(task, cfg, arch, state_path, halt_after)
    generation = cfg.generation if protocol == "GFL4BS" else "none"
    if generation != "none" and eval_net is None:
        eval_net = run_training(task, "FedAvg", cfg, arch).model

    state_path = Path(state_path) if state_path else None
    fingerprint = {"protocol": protocol, "cfg": cfg.to_dict(), "arch": arch.to_dict()}
    state = _load_state(state_path, fingerprint)
    vehicles = [VehicleState(v, task.train[v].modalities(), task.train[v].copy(),
                             task.val[v]) for v in range(task.num_vehicles)]
    if state is None:
        net = build_model(ArchConfig.from_dict({**arch.to_dict(), "seed": cfg.seed}))
        report, ledger, start, selected = TrainReport(protocol), CommLedger(), 1, None
    else:
        net, report, ledger = state["net"], state["report"], state["ledger"]
        start, selected = state["round"] + 1, state["selected"]
        for v, synth in zip(vehicles, state["vehicles"]):
            v.synthetic = synth

    scale = task.scenario.gps_scale
    executed = 0
    for rnd in range(start, cfg.rounds + 1):
        if halt_after is not None and executed >= halt_after:
            return TrainResult(report, ledger, net)
        sends = []
        for v in vehicles:
            if protocol == "GFL4BS":
                sends.append(v.held_branches())
            elif protocol == "FLASH" and rnd > 1:
                sends.append((selected, INTEGRATION))
            else:
                sends.append(BRANCHES)
        # loss of the freshly distributed global model on local validation data
        val_losses = [evaluate(net, v.val, scale, sends[i])[1] for i, v in enumerate(vehicles)
                      if len(v.val)]
        report.loss_history.append(float(np.mean(val_losses)))
        hist = report.loss_history
        delta = hist[-2] - hist[-1] if len(hist) >= 2 else float("nan")
        triggered = generation != "none" and generation_trigger(hist, cfg.gamma, cfg.trigger_on)

        uploads = []
        for v, sent in zip(vehicles, sends):
            rng = vehicle_rng(cfg.seed, rnd, v.vid)
            local = MultiModalNet(net.arch, {b: net.branches[b].copy() for b in sent})
            if triggered:
                generate_for_vehicle(v, local, eval_net, task, cfg, rng)
            train_branches = [b for b in sent if b == INTEGRATION or b in v.modalities
                              or protocol == "FedAvg"]
            try:
                local_update(local, v.data_mix(), train_branches, cfg, rng, scale)
            except DivergenceError as exc:
                exc.report = report
                raise
            uploads.append(local.branches)
            size = branch_transfer(net.arch, sent)
            ledger.record(rnd, v.vid, up=size, down=size)

        if protocol == "FedAvg":
            net = fedavg([MultiModalNet(net.arch, u) for u in uploads])
        else:
            net = aggregate(net, uploads, set().union(*sends))
        if protocol == "FLASH":
            selected = select_flash_branch(net, task, vehicles)
            report.selected_branches.append(selected)
        _record_metrics(report, rnd, net, task, _held_for_eval(protocol, selected), delta,
                        triggered, ledger)
        executed += 1
        _save_state(state_path, {
            "version": STATE_VERSION, "fingerprint": fingerprint, "round": rnd, "net": net,
            "report": report, "ledger": ledger, "selected": selected,
            "vehicles": [v.synthetic for v in vehicles]})

    _finish(report, net, task, cfg, _held_for_eval(protocol, selected))
    return TrainResult(report, ledger, net)


def _run_central(task: FederatedTask, cfg: RoundConfig, arch: ArchConfig,
                 state_path, halt_after) -> TrainResult:
    """Centralized baseline. Its epoch budget is split into ``cfg.rounds``
    reporting periods so the metrics rows line up with federated runs."""
    state_path = Path(state_path) if state_path else None
    fingerprint = {"protocol": "CL", "cfg": cfg.to_dict(), "arch": arch.to_dict()}
    state = _load_state(state_path, fingerprint)
    pooled = VehicleDataset.concat(task.train)
    scale = task.scenario.gps_scale
    periods = cfg.rounds
    base, extra = divmod(cfg.central_epochs, periods)
    if state is None:
        net = build_model(ArchConfig.from_dict({**arch.to_dict(), "seed": cfg.seed}))
        report, ledger, start = TrainReport("CL"), CommLedger(), 1
    else:
        net, report, ledger, start = (state["net"], state["report"], state["ledger"],
                                      state["round"] + 1)
    executed = 0
    for rnd in range(start, periods + 1):
        if halt_after is not None and executed >= halt_after:
            return TrainResult(report, ledger, net)
        if rnd == 1:
            for v, ds in enumerate(task.train):
                ledger.record(1, v, up=raw_data_values(ds), down=0)
        epochs = base + (1 if rnd <= extra else 0)
        if epochs:
            period_cfg = RoundConfig(**{**cfg.to_dict(), "local_epochs": epochs})
            try:
                local_update(net, pooled, BRANCHES, period_cfg,
                             vehicle_rng(cfg.seed, rnd, task.num_vehicles), scale)
            except DivergenceError as exc:
                exc.report = report
                raise
        _, loss = evaluate(net, VehicleDataset.concat(task.val), scale)
        report.loss_history.append(loss)
        hist = report.loss_history
        delta = hist[-2] - hist[-1] if len(hist) >= 2 else float("nan")
        _record_metrics(report, rnd, net, task, None, delta, False, ledger)
        executed += 1
        _save_state(state_path, {"version": STATE_VERSION, "fingerprint": fingerprint,
                                 "round": rnd, "net": net, "report": report, "ledger": ledger})
    _finish(report, net, task, cfg, None)
    return TrainResult(report, ledger, net)


def run_benchmark_fedavg(task, cfg, arch, **kw) -> TrainResult:
    return run_training(task, "FedAvg", cfg, arch, **kw)


def run_benchmark_flash(task, cfg, arch, **kw) -> TrainResult:
    return run_training(task, "FLASH", cfg, arch, **kw)


def run_benchmark_cl(task, cfg, arch, **kw) -> TrainResult:
    return run_training(task, "CL", cfg, arch, **kw)
