"""Multi-branch beam classifier.

Three modality extractors (GPS, RGB, LiDAR) each map raw input to a feature
vector; the features are concatenated in the fixed order GPS, RGB, LiDAR and
fed to an integration branch that emits one logit per codebook beam. A
modality that is absent for a sample contributes a zero vector to the
concatenation unless an explicit fill feature is supplied for it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .autodiff import (DEFAULT_EPS, DEFAULT_MOMENTUM, GradientSet, LayerSpec, Network,
                       backward, forward)
from .errors import ConfigurationError, ProtocolError
from .fileio import read_npz, write_npz


class Modality(str, Enum):
    GPS = "gps"
    RGB = "rgb"
    LIDAR = "lidar"


MODALITIES = (Modality.GPS, Modality.RGB, Modality.LIDAR)
INTEGRATION = "integration"
BRANCHES = ("gps", "rgb", "lidar", INTEGRATION)

CHECKPOINT_VERSION = 1


@dataclass
class ArchConfig:
    gps_dims: tuple = (2, 16, 8)
    rgb_dims: tuple = (64, 48, 16)
    lidar_dims: tuple = (128, 48, 16)
    integration_hidden: tuple = (64,)
    num_beams: int = 16
    seed: int = 0
    bn_momentum: float = DEFAULT_MOMENTUM
    bn_eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.gps_dims = tuple(int(d) for d in self.gps_dims)
        self.rgb_dims = tuple(int(d) for d in self.rgb_dims)
        self.lidar_dims = tuple(int(d) for d in self.lidar_dims)
        self.integration_hidden = tuple(int(d) for d in self.integration_hidden)
        for dims in (self.gps_dims, self.rgb_dims, self.lidar_dims):
            if len(dims) < 2 or min(dims) < 1:
                raise ConfigurationError(f"extractor dims must be >= 2 positive widths: {dims}")
        if self.gps_dims[0] != 2:
            raise ConfigurationError("GPS input width must be 2")
        if any(d < 1 for d in self.integration_hidden):
            raise ConfigurationError("integration widths must be positive")
        if self.num_beams < 2:
            raise ConfigurationError("need at least two beams")

    def dims(self, modality: Modality | str) -> tuple:
        return getattr(self, f"{Modality(modality).value}_dims")

    def feature_dim(self, modality: Modality | str) -> int:
        return self.dims(modality)[-1]

    def input_dim(self, modality: Modality | str) -> int:
        return self.dims(modality)[0]

    @property
    def integration_in(self) -> int:
        return sum(self.feature_dim(q) for q in MODALITIES)

    def slot(self, modality: Modality | str) -> slice:
        """Column range of ``modality`` inside the fused feature vector."""
        start = 0
        for q in MODALITIES:
            width = self.feature_dim(q)
            if q == Modality(modality):
                return slice(start, start + width)
            start += width
        raise KeyError(modality)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def extractor_specs(dims: tuple) -> list[LayerSpec]:
    specs = []
    for a, b in zip(dims, dims[1:]):
        specs += [LayerSpec("dense", a, b), LayerSpec("batchnorm", b, b), LayerSpec("relu", b, b)]
    return specs


def integration_specs(arch: ArchConfig) -> list[LayerSpec]:
    specs = []
    width = arch.integration_in
    for h in arch.integration_hidden:
        specs += [LayerSpec("dense", width, h), LayerSpec("batchnorm", h, h),
                  LayerSpec("relu", h, h)]
        width = h
    specs.append(LayerSpec("dense", width, arch.num_beams))
    return specs


def branch_specs(arch: ArchConfig) -> dict[str, list[LayerSpec]]:
    out = {q.value: extractor_specs(arch.dims(q)) for q in MODALITIES}
    out[INTEGRATION] = integration_specs(arch)
    return out


def count_parameters(specs: list[LayerSpec]) -> int:
    """Closed-form trainable parameter count (weights, biases, BN affine)."""
    total = 0
    for s in specs:
        if s.kind == "dense":
            total += s.fan_in * s.fan_out + s.fan_out
        elif s.kind == "batchnorm":
            total += 2 * s.fan_out
    return total


def branch_parameter_counts(arch: ArchConfig) -> dict[str, int]:
    return {name: count_parameters(specs) for name, specs in branch_specs(arch).items()}


@dataclass
class MultiModalNet:
    arch: ArchConfig
    branches: dict[str, Network] = field(default_factory=dict)

    def __post_init__(self):
        integ = self.branches.get(INTEGRATION)
        if integ is not None and integ.in_features != self.arch.integration_in:
            raise ConfigurationError("integration input width does not match feature dims")

    def num_parameters(self) -> int:
        return sum(b.num_parameters() for b in self.branches.values())

    def copy(self) -> "MultiModalNet":
        return MultiModalNet(self.arch, {k: v.copy() for k, v in self.branches.items()})

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"{name}/{k}": v for name, branch in self.branches.items()
                for k, v in branch.state_arrays().items()}

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{name}/{k}": v for name, branch in self.branches.items()
                for k, v in branch.parameters().items()}


def build_model(arch: ArchConfig) -> MultiModalNet:
    rng = np.random.default_rng(arch.seed)
    branches = {name: Network.from_specs(specs, rng, arch.bn_momentum, arch.bn_eps)
                for name, specs in branch_specs(arch).items()}
    return MultiModalNet(arch, branches)


@dataclass
class ModelInput:
    """A batch of model-ready inputs.

    ``mask[n, q]`` says whether modality ``q`` (GPS, RGB, LiDAR order) is
    observed for sample ``n``. ``fill`` is an optional ``(N, integration_in)``
    array of substitute features used for absent modalities where
    ``fill_mask`` is set.
    """

    gps: np.ndarray
    rgb: np.ndarray
    lidar: np.ndarray
    mask: np.ndarray
    fill: np.ndarray | None = None
    fill_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return self.gps.shape[0]

    def raw(self, modality: Modality | str) -> np.ndarray:
        return getattr(self, Modality(modality).value)

    def subset(self, idx) -> "ModelInput":
        return ModelInput(self.gps[idx], self.rgb[idx], self.lidar[idx], self.mask[idx],
                          None if self.fill is None else self.fill[idx],
                          None if self.fill_mask is None else self.fill_mask[idx])


def fuse_features(features: dict, mask: np.ndarray, arch: ArchConfig,
                  fill: np.ndarray | None = None,
                  fill_mask: np.ndarray | None = None) -> np.ndarray:
    """Concatenate per-modality features, zero-filling absent ones.

    ``features["gps"|"rgb"|"lidar"]`` holds one row per sample where that
    modality's mask column is true, or may be omitted entirely.
    """
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    fused = np.zeros((n, arch.integration_in))
    for j, q in enumerate(MODALITIES):
        slot = arch.slot(q)
        rows = mask[:, j]
        feats = features.get(q.value)
        if feats is not None and rows.any():
            fused[rows, slot] = feats
        if fill is not None and fill_mask is not None:
            frows = ~rows & fill_mask[:, j]
            if frows.any():
                fused[frows, slot] = fill[frows, slot]
    return fused


@dataclass
class ModelTrace:
    rows: dict
    traces: dict
    stats: dict
    fused: np.ndarray


def model_forward(net: MultiModalNet, inp: ModelInput, mode: str = "eval",
                  update_stats: bool = True, held=None):
    """Full forward pass. ``held`` restricts which extractor branches run;
    modalities whose branch is not held are treated as absent for every
    sample. Returns ``(logits, ModelTrace)``."""
    held = set(net.branches) if held is None else set(held)
    mask = np.asarray(inp.mask, dtype=bool).copy()
    feats, rows, traces, stats = {}, {}, {}, {}
    for j, q in enumerate(MODALITIES):
        if q.value not in held or q.value not in net.branches:
            mask[:, j] = False
            continue
        r = np.flatnonzero(mask[:, j])
        if r.size == 0:
            continue
        out, tr, st = forward(net.branches[q.value], inp.raw(q)[r], mode, update_stats)
        feats[q.value], rows[q.value], traces[q.value], stats[q.value] = out, r, tr, st
    fused = fuse_features(feats, mask, net.arch, inp.fill, inp.fill_mask)
    logits, tr, st = forward(net.branches[INTEGRATION], fused, mode, update_stats)
    traces[INTEGRATION], stats[INTEGRATION] = tr, st
    return logits, ModelTrace(rows, traces, stats, fused)


def model_backward(net: MultiModalNet, trace: ModelTrace, grad_logits: np.ndarray,
                   stat_grads: dict | None = None) -> dict[str, GradientSet]:
    """Backpropagate through the integration branch and every extractor that
    ran in ``trace``. Extractor ``GradientSet.input`` holds gradients for the
    rows listed in ``trace.rows``; the integration entry's input gradient is
    w.r.t. the fused feature matrix."""
    stat_grads = stat_grads or {}
    out = {}
    integ = backward(net.branches[INTEGRATION], trace.traces[INTEGRATION], grad_logits,
                     stat_grads.get(INTEGRATION))
    out[INTEGRATION] = integ
    for q in MODALITIES:
        if q.value not in trace.traces:
            continue
        g = integ.input[trace.rows[q.value], net.arch.slot(q)]
        out[q.value] = backward(net.branches[q.value], trace.traces[q.value], g,
                                stat_grads.get(q.value))
    return out


def predict(net: MultiModalNet, inp: ModelInput, mode: str = "eval", held=None):
    """Beam logits and argmax indices (ties resolve to the lowest index)."""
    logits, _ = model_forward(net, inp, mode, update_stats=False, held=held)
    return logits, np.argmax(logits, axis=1)


def split_branches(net: MultiModalNet) -> dict[str, Network]:
    return {name: branch.copy() for name, branch in net.branches.items()}


def merge_branches(parts: dict[str, Network], arch: ArchConfig) -> MultiModalNet:
    missing = [b for b in BRANCHES if b not in parts]
    if missing:
        raise ProtocolError(f"cannot merge: missing branches {missing}")
    return MultiModalNet(arch, {b: parts[b].copy() for b in BRANCHES})


def save_checkpoint(path: str | Path, net: MultiModalNet, extra: dict | None = None) -> None:
    arrays = dict(net.state_arrays())
    meta = {"version": CHECKPOINT_VERSION, "arch": net.arch.to_dict(),
            "branches": sorted(net.branches), "extra": extra or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    write_npz(path, arrays)


def load_checkpoint(path: str | Path) -> MultiModalNet:
    arrays = read_npz(path)
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {meta.get('version')}")
    arch = ArchConfig.from_dict(meta["arch"])
    net = build_model(arch)
    net.branches = {k: v for k, v in net.branches.items() if k in meta["branches"]}
    for name, branch in net.branches.items():
        prefix = f"{name}/"
        branch.load_state_arrays({k[len(prefix):]: v for k, v in arrays.items()
                                  if k.startswith(prefix)})
    return net
