"""Small reverse-mode engine for dense / batch-norm / ReLU stacks.

Networks are plain containers of layer objects. ``forward`` returns a trace
that ``backward`` consumes, so several forward passes can be in flight for
the same network (the generator relies on this). All arithmetic is float64.

Weights are stored as ``(fan_out, fan_in)`` and applied as ``x @ W.T + b``.
Batch variance is the biased (divide-by-N) estimate, and running variance is
kept under the same convention.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError

LAYER_KINDS = ("dense", "batchnorm", "relu")

DEFAULT_MOMENTUM = 0.1
DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int
    fan_out: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.fan_in < 1 or self.fan_out < 1:
            raise ConfigurationError(f"non-positive width in {self}")
        if self.kind != "dense" and self.fan_in != self.fan_out:
            raise ConfigurationError(f"{self.kind} layer must have fan_in == fan_out")


@dataclass
class Dense:
    W: np.ndarray
    b: np.ndarray

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("dense", self.W.shape[1], self.W.shape[0])


@dataclass
class BNLayerState:
    """Batch-norm layer: learnable affine pair plus running statistics."""

    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    momentum: float = DEFAULT_MOMENTUM
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigurationError("batch-norm eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError("batch-norm momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running variance must be non-negative")

    @classmethod
    def fresh(cls, width: int, momentum: float = DEFAULT_MOMENTUM,
              eps: float = DEFAULT_EPS) -> "BNLayerState":
        return cls(np.zeros(width), np.ones(width), np.ones(width), np.zeros(width),
                   momentum, eps)

    @property
    def spec(self) -> LayerSpec:
        n = self.gamma.shape[0]
        return LayerSpec("batchnorm", n, n)


@dataclass
class ReLU:
    width: int

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec("relu", self.width, self.width)


_PARAM_ROLES = {Dense: ("W", "b"), BNLayerState: ("gamma", "beta"), ReLU: ()}
_BUFFER_ROLES = ("running_mean", "running_var")


class Network:
    """Ordered stack of layers with flat name-addressable parameters.

    Parameter names look like ``"0.W"`` or ``"1.gamma"`` (layer index, role).
    """

    def __init__(self, layers: list):
        self.layers = list(layers)
        specs = self.specs
        for prev, nxt in zip(specs, specs[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ConfigurationError(
                    f"layer width mismatch: {prev.fan_out} feeds {nxt.fan_in}")

    @classmethod
    def from_specs(cls, specs: list[LayerSpec], rng: np.random.Generator,
                   momentum: float = DEFAULT_MOMENTUM, eps: float = DEFAULT_EPS) -> "Network":
        layers = []
        for s in specs:
            if s.kind == "dense":
                limit = np.sqrt(6.0 / (s.fan_in + s.fan_out))
                layers.append(Dense(rng.uniform(-limit, limit, size=(s.fan_out, s.fan_in)),
                                    np.zeros(s.fan_out)))
            elif s.kind == "batchnorm":
                layers.append(BNLayerState.fresh(s.fan_in, momentum, eps))
            else:
                layers.append(ReLU(s.fan_in))
        return cls(layers)

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def in_features(self) -> int:
        return self.specs[0].fan_in

    @property
    def out_features(self) -> int:
        return self.specs[-1].fan_out

    def bn_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, BNLayerState)]

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every trainable array."""
        out = {}
        for i, layer in enumerate(self.layers):
            for role in _PARAM_ROLES[type(layer)]:
                out[f"{i}.{role}"] = getattr(layer, role)
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i in self.bn_indices():
            for role in _BUFFER_ROLES:
                out[f"{i}.{role}"] = getattr(self.layers[i], role)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values into the existing arrays (shapes must match)."""
        own = self.state_arrays()
        if set(own) != set(arrays):
            raise ConfigurationError("state keys do not match network layout")
        for name, arr in arrays.items():
            if own[name].shape != np.shape(arr):
                raise ConfigurationError(f"shape mismatch for {name}")
            own[name][...] = arr

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.parameters().values()))

    def copy(self) -> "Network":
        return copy.deepcopy(self)


@dataclass
class Trace:
    mode: str
    inputs: list = field(default_factory=list)
    cache: list = field(default_factory=list)


@dataclass
class GradientSet:
    params: dict[str, np.ndarray]
    input: np.ndarray | None = None


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InputError(f"expected a (batch, features) array, got shape {x.shape}")
    if x.shape[1] != net.in_features:
        raise ConfigurationError(
            f"input width {x.shape[1]} does not match first layer fan_in {net.in_features}")
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite values in network input")
    return x


def forward(net: Network, x: np.ndarray, mode: str = "train", update_stats: bool = True):
    """Run ``net`` on a batch.

    In train mode batch-norm layers normalize with the batch's own mean and
    (biased) variance and, when ``update_stats`` is set, fold them into the
    running statistics by exponential moving average. In eval mode the
    running statistics are used and never modified.

    Returns ``(output, trace, batch_stats)`` where ``batch_stats`` maps each
    batch-norm layer index to the ``(mean, var)`` of that layer's input batch,
    whatever the mode.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = _check_input(net, x)
    trace = Trace(mode)
    stats = {}
    for i, layer in enumerate(net.layers):
        trace.inputs.append(h)
        if isinstance(layer, Dense):
            trace.cache.append(None)
            h = h @ layer.W.T + layer.b
        elif isinstance(layer, ReLU):
            trace.cache.append(None)
            h = np.maximum(h, 0.0)
        else:
            mean = h.mean(axis=0)
            centered = h - mean
            var = (centered * centered).mean(axis=0)
            stats[i] = (mean, var)
            if mode == "train":
                inv_std = 1.0 / np.sqrt(var + layer.eps)
                xhat = centered * inv_std
                if update_stats:
                    m = layer.momentum
                    layer.running_mean[...] = (1 - m) * layer.running_mean + m * mean
                    layer.running_var[...] = (1 - m) * layer.running_var + m * var
            else:
                inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
                xhat = (h - layer.running_mean) * inv_std
            trace.cache.append((xhat, inv_std, mean))
            h = layer.gamma * xhat + layer.beta
    return h, trace, stats


def backward(net: Network, trace: Trace, grad_out: np.ndarray,
             stat_grads: dict | None = None) -> GradientSet:
    """Gradients of a scalar loss w.r.t. every parameter and the input.

    ``grad_out`` is dLoss/dOutput. ``stat_grads`` optionally maps a
    batch-norm layer index to ``(dLoss/dbatch_mean, dLoss/dbatch_var)`` for
    losses that depend directly on the batch statistics returned by
    ``forward``; those contributions are chained into the input gradient.
    """
    stat_grads = stat_grads or {}
    g = np.asarray(grad_out, dtype=np.float64)
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x = trace.inputs[i]
        if isinstance(layer, Dense):
            grads[f"{i}.W"] = g.T @ x
            grads[f"{i}.b"] = g.sum(axis=0)
            g = g @ layer.W
        elif isinstance(layer, ReLU):
            g = g * (x > 0)
        else:
            xhat, inv_std, mean = trace.cache[i]
            n = x.shape[0]
            grads[f"{i}.gamma"] = (g * xhat).sum(axis=0)
            grads[f"{i}.beta"] = g.sum(axis=0)
            dxhat = g * layer.gamma
            if trace.mode == "train":
                g = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                     - xhat * (dxhat * xhat).sum(axis=0))
            else:
                g = dxhat * inv_std
            if i in stat_grads:
                dmean, dvar = stat_grads[i]
                g = g + dmean / n + (2.0 / n) * (x - mean) * dvar
    return GradientSet(grads, g)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy between target distributions and softmax(logits).

    ``targets`` rows must be probability vectors (one-hot or soft). Returns
    ``(loss, dloss/dlogits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise InputError(f"logits {logits.shape} and targets {targets.shape} differ")
    if np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-6) or np.any(targets < 0):
        raise InputError("target rows must be probability vectors")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_z
    # 0 * log p := 0 so hard zeros in the target never produce nan
    loss = -np.sum(np.where(targets > 0, targets * log_p, 0.0)) / n
    grad = (np.exp(log_p) - targets) / n
    return float(loss), grad


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState):
    """Bias-corrected Adam update, applied in place. Keys absent from
    ``grads`` are left untouched."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise InputError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    for name, g in grads.items():
        params[name] -= lr * g
    return params
