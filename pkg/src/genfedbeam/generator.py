"""Zero-shot multi-modal sample generator.

Synthetic inputs are optimized so that the statistics they induce at every
batch-norm layer of the global model match that layer's running statistics,
while the global model's prediction is pulled towards a hard target label
and towards the evaluation model's soft prediction.

The model is always run with its running statistics (eval-mode
normalization); the batch mean and variance of each BN layer's input are
read off separately and compared with the running values. Nothing in the
model is written to.

LiDAR is optimized through a continuous latent grid. The grid actually fed
to the model is the latent thresholded to {0, 1} with the TX and RX cells
stamped on top; its gradient is passed straight through to the latent.

In filling mode the trainable variables are the fused-feature slots of the
modalities a sample lacks, matching is restricted to the integration
branch's BN layers and the hard label is the sample's true label.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (AdamState, adam_step, backward, one_hot, sgd_step, softmax,
                       softmax_cross_entropy)
from .beam_model import (INTEGRATION, MODALITIES, ModelInput, ModelTrace, MultiModalNet,
                         model_backward, model_forward)
from .data import RX_MARK, TX_MARK
from .errors import ConfigurationError, DivergenceError, InputError


@dataclass
class GeneratorConfig:
    epochs: int = 500
    lr: float = 1e-4
    optimizer: str = "adam"
    tau: float = 0.5
    bn_weight: float = 1.0
    hard_weight: float = 1.0
    soft_weight: float = 1.0
    # clamp box for synthetic GPS in model units (positions / gps_scale)
    gps_low: tuple = (-1.0, 0.0)
    gps_high: tuple = (1.0, 1.0)
    # valid intensity range of synthetic RGB pixels
    rgb_low: float = 0.0
    rgb_high: float = 1.0
    # std of the Gaussian noise that GPS, RGB and the LiDAR latent start from
    init_std: float = 1.0
    keep_best: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("generator epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown generator optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ConfigurationError("generator learning rate must be >= 0")
        if self.init_std < 0 or self.rgb_low > self.rgb_high:
            raise ConfigurationError("bad generator initialization or RGB range")
        self.gps_low = tuple(float(v) for v in self.gps_low)
        self.gps_high = tuple(float(v) for v in self.gps_high)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


# ---------------------------------------------------------------- LiDAR projection

def binarize(x: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """1 where ``x > tau``, else 0 (the threshold itself maps to 0)."""
    return (np.asarray(x) > tau).astype(np.int8)


def embed_tx_rx(grid: np.ndarray, tx_cell, rx_cell) -> np.ndarray:
    """Stamp the transmitter (-1) and receiver (-2) cells into a {0,1} grid.

    ``grid`` is a single grid of any shape, cells are index tuples into it
    (or flat indices). Markers from an earlier call are cleared first, so
    the operation is idempotent.
    """
    out = np.array(grid, dtype=np.int8, copy=True)
    tx = _flat_index(tx_cell, out.shape)
    rx = _flat_index(rx_cell, out.shape)
    if tx == rx:
        raise InputError("TX and RX cells coincide")
    flat = out.reshape(-1)
    flat[flat < 0] = 0
    flat[tx] = TX_MARK
    flat[rx] = RX_MARK
    return out


def _flat_index(cell, shape) -> int:
    size = int(np.prod(shape))
    if np.ndim(cell) == 0:
        idx = int(cell)
        if not 0 <= idx < size:
            raise InputError(f"cell {idx} outside grid of {size} cells")
        return idx
    cell = tuple(int(c) for c in cell)
    if len(cell) != len(shape) or any(not 0 <= c < s for c, s in zip(cell, shape)):
        raise InputError(f"cell {cell} outside grid of shape {shape}")
    return int(np.ravel_multi_index(cell, shape))


def project_lidar(latent: np.ndarray, tx: np.ndarray, rx: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise ``embed_tx_rx(binarize(latent))`` for flat ``(N, cells)`` grids."""
    out = binarize(latent, tau)
    rows = np.arange(out.shape[0])
    if np.any(tx == rx):
        raise InputError("TX and RX cells coincide")
    out[rows, tx] = TX_MARK
    out[rows, rx] = RX_MARK
    return out


# ---------------------------------------------------------------- batches and loss

@dataclass
class SynthBatch:
    """Optimization state of one generator call.

    Generation mode (``mode="generate"``): ``gps``, ``rgb`` and
    ``lidar_latent`` are trainable, ``lidar`` is the projected grid.
    Filling mode (``mode="fill"``): ``inputs`` is frozen real data and
    ``fill`` holds the trainable missing-modality features (``fill_mask``
    marks which slots are trainable).
    """

    mode: str
    targets: np.ndarray
    gps: np.ndarray | None = None
    rgb: np.ndarray | None = None
    lidar_latent: np.ndarray | None = None
    lidar: np.ndarray | None = None
    tx: np.ndarray | None = None
    rx: np.ndarray | None = None
    inputs: ModelInput | None = None
    fill: np.ndarray | None = None
    fill_mask: np.ndarray | None = None
    soft_targets: np.ndarray | None = None
    optimizer: AdamState = field(default_factory=AdamState)

    def __post_init__(self):
        if self.mode not in ("generate", "fill"):
            raise ConfigurationError(f"unknown batch mode {self.mode!r}")
        generate = self.gps is not None
        filling = self.fill is not None
        if generate == filling or (self.mode == "fill") != filling:
            raise ConfigurationError("exactly one of generation and filling state must be set")
        self.targets = np.asarray(self.targets, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def model_input(self) -> ModelInput:
        if self.mode == "generate":
            n = len(self)
            return ModelInput(self.gps, self.rgb, self.lidar.astype(np.float64),
                              np.ones((n, 3), dtype=bool))
        inp = self.inputs
        return ModelInput(inp.gps, inp.rgb, inp.lidar, inp.mask, self.fill, self.fill_mask)

    def trainable(self) -> dict[str, np.ndarray]:
        if self.mode == "generate":
            return {"gps": self.gps, "rgb": self.rgb, "lidar": self.lidar_latent}
        return {"fill": self.fill}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.trainable().items()}


@dataclass
class GenLossReport:
    bn_term: float
    hard_label_term: float
    soft_label_term: float
    total: float
    layer_distances: list = field(default_factory=list)


def bn_matching(net: MultiModalNet, trace: ModelTrace, branches) -> tuple[float, dict, list]:
    """Squared distance between batch and running statistics, summed over
    the BN layers of ``branches``, with its gradient w.r.t. the batch stats."""
    term = 0.0
    stat_grads, rows = {}, []
    for name in branches:
        if name not in trace.stats:
            continue
        layers = net.branches[name].layers
        stat_grads[name] = {}
        for idx, (mu, var) in trace.stats[name].items():
            bn = layers[idx]
            dm = mu - bn.running_mean
            dv = var - bn.running_var
            d_mean, d_var = float(dm @ dm), float(dv @ dv)
            term += d_mean + d_var
            stat_grads[name][idx] = (2.0 * dm, 2.0 * dv)
            rows.append((name, idx, d_mean, d_var))
    return term, stat_grads, rows


def gen_loss(global_net: MultiModalNet, eval_net: MultiModalNet | None, batch: SynthBatch,
             cfg: GeneratorConfig | None = None):
    """Generator objective and its gradient w.r.t. the batch's trainable
    tensors. Returns ``(GenLossReport, grads)``."""
    cfg = cfg or GeneratorConfig()
    n = len(batch)
    if n < 2:
        raise InputError("generator batches need at least two samples for batch statistics")
    if eval_net is not None and eval_net.arch.num_beams != global_net.arch.num_beams:
        raise ConfigurationError("global and evaluation models disagree on the beam count")
    m = global_net.arch.num_beams
    if np.any(batch.targets < 0) or np.any(batch.targets >= m):
        raise InputError(f"target labels must lie in 0..{m - 1}")
    inp = batch.model_input()
    logits, trace = model_forward(global_net, inp, mode="eval", update_stats=False)
    matched = (INTEGRATION,) if batch.mode == "fill" else tuple(global_net.branches)
    bn_term, stat_grads, rows = bn_matching(global_net, trace, matched)
    hard, g_hard = softmax_cross_entropy(logits, one_hot(batch.targets, m))
    soft_t = batch.soft_targets
    if soft_t is None and eval_net is not None:
        soft_t = softmax(model_forward(eval_net, inp, mode="eval", update_stats=False)[0])
    if soft_t is not None:
        soft, g_soft = softmax_cross_entropy(logits, soft_t)
    else:
        soft, g_soft = 0.0, np.zeros_like(logits)
    total = cfg.bn_weight * bn_term + cfg.hard_weight * hard + cfg.soft_weight * soft
    report = GenLossReport(bn_term, hard, soft, total, rows)
    if not np.isfinite(total):
        raise DivergenceError("non-finite generator loss", report)

    grad_logits = cfg.hard_weight * g_hard + cfg.soft_weight * g_soft
    scaled = {b: {i: (cfg.bn_weight * dm, cfg.bn_weight * dv) for i, (dm, dv) in g.items()}
              for b, g in stat_grads.items()}
    if batch.mode == "fill":
        integ = backward(global_net.branches[INTEGRATION], trace.traces[INTEGRATION],
                         grad_logits, scaled.get(INTEGRATION))
        g_fill = np.zeros_like(batch.fill)
        present = inp.mask
        for j, q in enumerate(MODALITIES):
            rows_q = ~present[:, j] & batch.fill_mask[:, j]
            sl = global_net.arch.slot(q)
            g_fill[rows_q, sl] = integ.input[rows_q, sl]
        return report, {"fill": g_fill}
    sets = model_backward(global_net, trace, grad_logits, scaled)
    return report, {q.value: sets[q.value].input for q in MODALITIES}


# ---------------------------------------------------------------- optimization

@dataclass
class SynthResult:
    gps: np.ndarray
    rgb: np.ndarray
    lidar: np.ndarray
    labels: np.ndarray
    initial: GenLossReport
    final: GenLossReport
    history: list


def _step(batch: SynthBatch, grads: dict, cfg: GeneratorConfig) -> None:
    params = batch.trainable()
    if cfg.optimizer == "adam":
        batch.optimizer.lr = cfg.lr
        adam_step(params, grads, batch.optimizer)
    else:
        sgd_step(params, grads, cfg.lr)


def _optimize(global_net, eval_net, batch: SynthBatch, cfg: GeneratorConfig, project,
              on_step=None):
    """Run ``cfg.epochs`` updates; ``project`` restores feasibility after
    each one. Returns ``(initial, best, history)`` and leaves the best
    iterate (or the last one if ``keep_best`` is off) in ``batch``."""
    report, grads = gen_loss(global_net, eval_net, batch, cfg)
    initial = best = report
    best_state = batch.snapshot()
    history = [report]
    if on_step is not None:
        on_step(0, batch)
    for epoch in range(1, cfg.epochs + 1):
        _step(batch, grads, cfg)
        project(batch)
        if on_step is not None:
            on_step(epoch, batch)
        report, grads = gen_loss(global_net, eval_net, batch, cfg)
        history.append(report)
        if report.total < best.total:
            best, best_state = report, batch.snapshot()
    if cfg.keep_best:
        for k, v in best_state.items():
            batch.trainable()[k][...] = v
        project(batch)
    else:
        best = history[-1]
    return initial, best, history


def synthesize(global_net: MultiModalNet, eval_net: MultiModalNet | None, targets,
               cfg: GeneratorConfig, rng: np.random.Generator, tx_cell: int,
               rx_choices, on_step=None) -> SynthResult:
    """Generate one labeled synthetic sample per entry of ``targets``.

    Inputs start i.i.d. Gaussian with std ``cfg.init_std``. ``tx_cell`` is the flat LiDAR index
    of the BS; each sample's RX cell is drawn once from ``rx_choices``.
    ``on_step(epoch, batch)`` is called after initialization and after every
    update, once the LiDAR grid has been re-projected.
    """
    arch = global_net.arch
    targets = np.asarray(targets, dtype=np.int64)
    n = targets.shape[0]
    rx_choices = np.asarray(rx_choices, dtype=np.int64)
    rx_choices = rx_choices[rx_choices != tx_cell]
    if rx_choices.size == 0:
        raise InputError("no RX cell distinct from the TX cell")
    gps = rng.standard_normal((n, arch.input_dim("gps"))) * cfg.init_std
    rgb = rng.standard_normal((n, arch.input_dim("rgb"))) * cfg.init_std
    latent = rng.standard_normal((n, arch.input_dim("lidar"))) * cfg.init_std
    tx = np.full(n, int(tx_cell), dtype=np.int64)
    rx = rng.choice(rx_choices, size=n)
    low, high = np.array(cfg.gps_low), np.array(cfg.gps_high)

    def project(b: SynthBatch):
        np.clip(b.gps, low, high, out=b.gps)
        np.clip(b.rgb, cfg.rgb_low, cfg.rgb_high, out=b.rgb)
        b.lidar = project_lidar(b.lidar_latent, b.tx, b.rx, cfg.tau)

    batch = SynthBatch("generate", targets, gps=gps, rgb=rgb, lidar_latent=latent,
                       lidar=None, tx=tx, rx=rx)
    project(batch)
    initial, final, history = _optimize(global_net, eval_net, batch, cfg, project, on_step)
    return SynthResult(batch.gps.copy(), batch.rgb.copy(), batch.lidar.copy(), targets.copy(),
                       initial, final, history)


@dataclass
class FillResult:
    fill: np.ndarray
    fill_mask: np.ndarray
    initial: GenLossReport | None
    final: GenLossReport | None


def fill_missing_modality(global_net: MultiModalNet, eval_net: MultiModalNet | None,
                          inputs: ModelInput, labels, cfg: GeneratorConfig) -> FillResult:
    """Optimize substitute features for every absent modality of every sample.

    Fills start at zero (plain zero-fill) and are kept non-negative, since
    real features come out of a ReLU. The soft target is the evaluation
    model's prediction on the zero-filled input and stays fixed.
    """
    mask = np.asarray(inputs.mask, dtype=bool)
    n = mask.shape[0]
    if np.any(~mask.any(axis=1)):
        raise InputError("a sample has no modality at all")
    fill = np.zeros((n, global_net.arch.integration_in))
    fill_mask = ~mask
    if not fill_mask.any():
        return FillResult(fill, fill_mask, None, None)
    frozen = ModelInput(inputs.gps, inputs.rgb, inputs.lidar, mask)
    soft = None
    if eval_net is not None:
        soft = softmax(model_forward(eval_net, frozen, mode="eval", update_stats=False)[0])
    batch = SynthBatch("fill", labels, inputs=frozen, fill=fill, fill_mask=fill_mask,
                       soft_targets=soft)

    def project(b: SynthBatch):
        np.maximum(b.fill, 0.0, out=b.fill)

    initial, final, _ = _optimize(global_net, eval_net, batch, cfg, project)
    return FillResult(batch.fill.copy(), fill_mask, initial, final)
