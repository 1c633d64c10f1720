"""Fully connected generator/discriminator stacks and the RMSProp optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


@dataclass(frozen=True)
class Dense:
    out_dim: int


@dataclass(frozen=True)
class BatchNorm:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Tanh:
    pass


Layer = Union[Dense, BatchNorm, ReLU, Tanh]


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    layers: tuple[Layer, ...]

    def __post_init__(self):
        dims = [d.out_dim for d in self.layers if isinstance(d, Dense)]
        if not dims:
            raise ValueError("an MLP needs at least one Dense layer")
        if any(d < 1 for d in dims) or self.input_dim < 1:
            raise ValueError("layer widths must be positive")
        if isinstance(self.layers[0], BatchNorm):
            raise ValueError("BatchNorm must follow a Dense layer")

    @property
    def output_dim(self) -> int:
        return [d.out_dim for d in self.layers if isinstance(d, Dense)][-1]

    def with_output(self, out_dim: int) -> "MLPSpec":
        """Same trunk with the last Dense width replaced."""
        last = max(i for i, l in enumerate(self.layers) if isinstance(l, Dense))
        layers = list(self.layers)
        layers[last] = Dense(out_dim)
        return MLPSpec(self.input_dim, tuple(layers))


def _blocks(widths, out_dim: int) -> tuple[Layer, ...]:
    layers: list[Layer] = []
    for w in widths:
        layers += [Dense(w), BatchNorm(), ReLU()]
    layers.append(Dense(out_dim))
    return tuple(layers)


# (generator hidden widths, discriminator hidden widths)
ARCHITECTURES: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {
    "main": ((1024, 1024, 1024), (1024, 1024)),
    "simple-ring": ((64,), (64,)),
    "simple-grid": ((1024,), (1024,)),
    "simple-smile": ((32, 32), (32, 32)),
}


def architecture(name: str, noise_dim: int = 2, data_dim: int = 2,
                 critic_dim: int | None = None) -> tuple[MLPSpec, MLPSpec]:
    """Generator and discriminator specs for a named architecture.

    ``critic_dim`` is the discriminator output width; it defaults to the
    noise dimension because the kernel compares D(x) with z.
    """
    try:
        g_widths, d_widths = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    out = noise_dim if critic_dim is None else critic_dim
    return (MLPSpec(noise_dim, _blocks(g_widths, data_dim)),
            MLPSpec(data_dim, _blocks(d_widths, out)))


@dataclass
class ModelParams:
    """Trainable tensors plus BatchNorm running statistics."""

    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.buffers.items()})


def init_params(spec: MLPSpec, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform Dense weights, zero biases, identity BatchNorm."""
    weights: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    dim = spec.input_dim
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            limit = np.sqrt(6.0 / (dim + layer.out_dim))
            weights[f"l{i}.W"] = rng.uniform(-limit, limit, size=(dim, layer.out_dim))
            weights[f"l{i}.b"] = np.zeros(layer.out_dim)
            dim = layer.out_dim
        elif isinstance(layer, BatchNorm):
            weights[f"l{i}.gamma"] = np.ones(dim)
            weights[f"l{i}.beta"] = np.zeros(dim)
            buffers[f"l{i}.running_mean"] = np.zeros(dim)
            buffers[f"l{i}.running_var"] = np.ones(dim)
    return ModelParams(weights, buffers)


def bind(tape: Tape, params: ModelParams, prefix: str, trainable: bool) -> dict[str, Node]:
    """Put the weights on ``tape`` as variables (named ``prefix.name``) or constants."""
    if trainable:
        return {k: tape.variable(v, f"{prefix}.{k}") for k, v in params.weights.items()}
    return {k: tape.constant(v, f"{prefix}.{k}") for k, v in params.weights.items()}


def batch_norm(h: Node, gamma: Node, beta: Node, eps: float = BN_EPS) -> tuple[Node, np.ndarray, np.ndarray]:
    """Train-phase batch normalization; also returns the batch mean/variance values."""
    mu = ad.mean(h, axis=0, keepdims=True)
    centered = h - mu
    var = ad.mean(ad.square(centered), axis=0, keepdims=True)
    normed = centered / ad.sqrt(var + eps)
    return normed * gamma + beta, mu.value[0], var.value[0]


def forward(spec: MLPSpec, weights: Mapping[str, Node], params: ModelParams, x: Node,
            phase: str = "train", *, update_stats: bool = True,
            bn_eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Node:
    """Run the stack on a batch ``x`` of shape (B, input_dim).

    In the train phase BatchNorm normalizes with batch statistics (kept on
    the tape, so double backprop sees them) and, if ``update_stats``, folds
    them into ``params.buffers``. The eval phase uses the running statistics.
    """
    if phase not in ("train", "eval"):
        raise ValueError(f"phase must be 'train' or 'eval', got {phase!r}")
    if x.value.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ad.ShapeError(f"expected a (B, {spec.input_dim}) batch, got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    has_bn = any(isinstance(l, BatchNorm) for l in spec.layers)
    if phase == "train" and has_bn and x.shape[0] < 2:
        raise ValueError("train-phase BatchNorm needs a batch of at least 2 rows")
    h = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            h = h @ weights[f"l{i}.W"] + weights[f"l{i}.b"]
        elif isinstance(layer, BatchNorm):
            gamma, beta = weights[f"l{i}.gamma"], weights[f"l{i}.beta"]
            if phase == "train":
                h, mu, var = batch_norm(h, gamma, beta, bn_eps)
                if update_stats:
                    rm, rv = params.buffers[f"l{i}.running_mean"], params.buffers[f"l{i}.running_var"]
                    rm *= momentum
                    rm += (1.0 - momentum) * mu
                    rv *= momentum
                    rv += (1.0 - momentum) * var
            else:
                rm = params.buffers[f"l{i}.running_mean"]
                rv = params.buffers[f"l{i}.running_var"]
                h = (h - rm) * (1.0 / np.sqrt(rv + bn_eps)) * gamma + beta
        elif isinstance(layer, ReLU):
            h = ad.relu(h)
        elif isinstance(layer, Tanh):
            h = ad.tanh(h)
    return h


def apply(spec: MLPSpec, params: ModelParams, x: np.ndarray, phase: str = "eval") -> np.ndarray:
    """Plain-array forward pass with frozen parameters (no stat updates)."""
    tape = Tape()
    with tape.paused():
        out = forward(spec, bind(tape, params, "p", trainable=False), params,
                      tape.constant(x), phase, update_stats=False)
    return out.value


class RMSProp:
    """RMSProp with per-tensor squared-gradient accumulators.

    ``a <- decay * a + (1 - decay) * g**2`` then
    ``p <- p - lr * g / (sqrt(a) + eps)``, updated in place.
    """

    def __init__(self, lr: float, decay: float = 0.99, eps: float = 1e-8):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.accum: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        missing = set(params) - set(grads)
        if missing:
            raise KeyError(f"no gradient for {sorted(missing)}")
        for name, p in params.items():
            g = np.asarray(grads[name])
            if g.shape != p.shape:
                raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            a = self.accum.get(name)
            if a is None:
                a = self.accum[name] = np.zeros_like(p)
            a *= self.decay
            a += (1.0 - self.decay) * g * g
            p -= lr * g / (np.sqrt(a) + self.eps)
