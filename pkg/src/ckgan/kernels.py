"""Characteristic kernels and their learned soft combination.

All kernels act along the last axis, so ``k(x, y)`` with ``x, y`` of shape
(B, m) gives the B row-wise values, and :func:`gram` builds full matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape


class _Distances:
    """Lazily computed, shared distance nodes between two point sets."""

    def __init__(self, x: Node, y: Node):
        if x.shape[-1] != y.shape[-1]:
            raise ad.ShapeError(f"kernel arguments differ in dimension: {x.shape} vs {y.shape}")
        if x.shape[-1] < 1:
            raise ad.ShapeError("kernel arguments need dimension >= 1")
        self.x, self.y = x, y
        self._sq = self._l1 = self._l2 = None

    @property
    def sq(self) -> Node:
        if self._sq is None:
            self._sq = ad.sqdist(self.x, self.y)
        return self._sq

    @property
    def l1(self) -> Node:
        if self._l1 is None:
            self._l1 = ad.l1dist(self.x, self.y)
        return self._l1

    @property
    def l2(self) -> Node:
        if self._l2 is None:
            self._l2 = ad.sqrt(self.sq + ad.L2_EPS)
        return self._l2


def _positive(name: str, *values: float) -> None:
    for v in values:
        if not v > 0 or not math.isfinite(v):
            raise ValueError(f"{name} parameters must be positive, got {v!r}")


class _Kernel:
    bound = 1.0

    def __call__(self, x, y) -> Node:
        x, y = _lift(x, y)
        return self.from_distances(_Distances(x, y))

    def from_distances(self, d: _Distances) -> Node:
        raise NotImplementedError


@dataclass(frozen=True)
class Gaussian(_Kernel):
    sigma: float = 10.0

    def __post_init__(self):
        _positive("Gaussian", self.sigma)

    def from_distances(self, d):
        return ad.exp(d.sq * (-0.5 / self.sigma**2))


@dataclass(frozen=True)
class Laplacian(_Kernel):
    sigma: float = 100.0

    def __post_init__(self):
        _positive("Laplacian", self.sigma)

    def from_distances(self, d):
        return ad.exp(d.l1 * (-1.0 / self.sigma))


@dataclass(frozen=True)
class RBFMixture(_Kernel):
    """Unnormalized sum of Gaussians; bounded by the number of components."""

    sigmas: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)

    def __post_init__(self):
        if not self.sigmas:
            raise ValueError("RBFMixture needs at least one sigma")
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        _positive("RBFMixture", *self.sigmas)

    @property
    def bound(self) -> float:
        return float(len(self.sigmas))

    def from_distances(self, d):
        out = None
        for s in self.sigmas:
            term = ad.exp(d.sq * (-0.5 / s**2))
            out = term if out is None else out + term
        return out


@dataclass(frozen=True)
class Exponential(_Kernel):
    sigma: float = 10.0

    def __post_init__(self):
        _positive("Exponential", self.sigma)

    def from_distances(self, d):
        return ad.exp(d.l2 * (-1.0 / self.sigma))


@dataclass(frozen=True)
class Matern32(_Kernel):
    alpha: float = 1.0
    length: float = 10.0

    def __post_init__(self):
        _positive("Matern32", self.alpha, self.length)

    @property
    def bound(self) -> float:
        return self.alpha

    def from_distances(self, d):
        r = d.l2 * (math.sqrt(3.0) / self.length)
        return (r + 1.0) * ad.exp(-r) * self.alpha


@dataclass(frozen=True)
class Matern52(_Kernel):
    alpha: float = 1.0
    length: float = 10.0

    def __post_init__(self):
        _positive("Matern52", self.alpha, self.length)

    @property
    def bound(self) -> float:
        return self.alpha

    def from_distances(self, d):
        r = d.l2 * (math.sqrt(5.0) / self.length)
        poly = r + ad.square(r) * (1.0 / 3.0) + 1.0
        return poly * ad.exp(-r) * self.alpha


KernelKind = Union[Gaussian, Laplacian, RBFMixture, Exponential, Matern32, Matern52]

KERNEL_NAMES = ("gaussian", "laplacian", "rbf_mixture", "exponential", "matern32", "matern52")
MODES = ("soft", "direct", "onehot")


def default_components() -> tuple[KernelKind, ...]:
    return (Gaussian(), Laplacian(), RBFMixture(), Exponential(), Matern32(), Matern52())


@dataclass
class KernelMix:
    """Weighted sum of component kernels with trainable logits.

    ``mode`` picks how logits become weights: ``soft`` (softmax), ``direct``
    (clamped non-negative logits renormalized to the simplex) or ``onehot``
    (indicator of the softmax argmax).
    """

    components: tuple[KernelKind, ...] = field(default_factory=default_components)
    logits: np.ndarray | None = None
    mode: str = "soft"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown selection mode {self.mode!r}")
        if self.logits is None:
            init = 1.0 / len(self.components) if self.mode == "direct" else 0.0
            self.logits = np.full(len(self.components), init)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (len(self.components),):
            raise ValueError("one logit per component kernel is required")

    @property
    def bound(self) -> float:
        return max(k.bound for k in self.components)

    def weights(self) -> np.ndarray:
        tape = Tape()
        return self.weight_node(tape.constant(self.logits)).value

    def weight_node(self, logits: Node) -> Node:
        if self.mode == "soft":
            return ad.softmax(logits)
        if self.mode == "direct":
            pos = ad.relu(logits)
            total = ad.sum_(pos)
            if total.value <= 0:
                n = len(self.components)
                return logits.tape.constant(np.full(n, 1.0 / n))
            return pos / total
        j = self.selected(logits.value)
        # value exactly 1, derivative 1 with respect to the selected logit only
        picked = logits[j]
        unit = ad.exp(picked - ad.stop_gradient(picked))
        return ad.index_grad(unit, j, logits.shape)

    def selected(self, logits: np.ndarray | None = None) -> int:
        logits = self.logits if logits is None else logits
        e = np.exp(logits - logits.max())
        return int(np.argmax(e / e.sum()))

    def __call__(self, x, y, logits: Node | None = None) -> Node:
        x, y = _lift(x, y)
        return self.from_distances(_Distances(x, y), logits)

    def from_distances(self, d: _Distances, logits: Node | None = None) -> Node:
        if logits is None:
            logits = d.x.tape.constant(self.logits)
        w = self.weight_node(logits)
        if self.mode == "onehot":
            j = self.selected(logits.value)
            return self.components[j].from_distances(d) * w[j]
        out = None
        for i, k in enumerate(self.components):
            term = k.from_distances(d) * w[i]
            out = term if out is None else out + term
        return out


Kernel = Union[KernelKind, KernelMix]


def _lift(x, y) -> tuple[Node, Node]:
    if isinstance(x, Node):
        tape = x.tape
    elif isinstance(y, Node):
        tape = y.tape
    else:
        tape = Tape()
    if not isinstance(x, Node):
        x = tape.constant(x)
    if not isinstance(y, Node):
        y = tape.constant(y)
    return x, y


def evaluate(kernel: Kernel, x, y, logits: Node | None = None) -> Node:
    """Row-wise kernel values along the last axis."""
    if isinstance(kernel, KernelMix):
        return kernel(x, y, logits)
    return kernel(x, y)


def gram(kernel: Kernel, X, Y, logits: Node | None = None) -> Node:
    """Kernel matrix ``G[i, j] = k(X[i], Y[j])`` for X (n, m) and Y (p, m)."""
    X, Y = _lift(X, Y)
    if X.value.ndim != 2 or Y.value.ndim != 2:
        raise ad.ShapeError(f"gram expects 2-D point sets, got {X.shape} and {Y.shape}")
    if X.shape[1] != Y.shape[1]:
        raise ad.ShapeError(f"gram point sets differ in dimension: {X.shape} vs {Y.shape}")
    n, m = X.shape
    p = Y.shape[0]
    Xb = ad.reshape(X, (n, 1, m))
    Yb = ad.reshape(Y, (1, p, m))
    return evaluate(kernel, Xb, Yb, logits)


def make_kernel(name: str, *, gaussian_sigma: float = 10.0, laplacian_sigma: float = 100.0,
                rbf_sigmas=(1.0, 2.0, 4.0, 8.0, 16.0), exponential_sigma: float = 10.0,
                matern_alpha: float = 1.0, matern_length: float = 10.0,
                mode: str = "soft") -> Kernel:
    """Build a kernel by config name; ``mix`` gives the six-way learned combination."""
    parts = {
        "gaussian": Gaussian(gaussian_sigma),
        "laplacian": Laplacian(laplacian_sigma),
        "rbf_mixture": RBFMixture(tuple(rbf_sigmas)),
        "exponential": Exponential(exponential_sigma),
        "matern32": Matern32(matern_alpha, matern_length),
        "matern52": Matern52(matern_alpha, matern_length),
    }
    if name == "mix":
        return KernelMix(tuple(parts[k] for k in KERNEL_NAMES), mode=mode)
    try:
        return parts[name]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; choose from {KERNEL_NAMES + ('mix',)}") from None
