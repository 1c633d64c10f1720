"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every operation on a :class:`Node` computes its value eagerly and appends a
record to the owning :class:`Tape`. Backward passes are built from the same
primitive operations, so a gradient can itself be differentiated (double
backprop, needed for gradient penalties).

Example:
    >>> tape = Tape()
    >>> x = tape.variable(3.0, "x")
    >>> y = x * x
    >>> gradient(y, [x])["x"]
    array(6.)
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

L2_EPS = 1e-12


class TapeError(ValueError):
    """Base error raised by tape construction, replay or differentiation."""


class ShapeError(TapeError):
    pass


class NonFiniteError(TapeError):
    pass


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(node, grad, needs) -> one grad Node (or None) per parent
    vjp: Callable[["Node", "Node", tuple[bool, ...]], list]


_OPS: dict[str, Op] = {}


def _register(name: str, forward: Callable, vjp: Callable) -> None:
    _OPS[name] = Op(name, forward, vjp)


class Node:
    """One recorded value on a tape. Values are treated as immutable and may
    be views of other nodes' values."""

    __slots__ = ("value", "op", "parents", "attrs", "tape", "name", "index")
    __array_ufunc__ = None

    def __init__(self, tape, value, op, parents=(), attrs=None, name=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def label(self) -> str:
        return self.name if self.name is not None else f"n{self.index}"

    def __repr__(self) -> str:
        return f"Node({self.label}, op={self.op}, shape={self.shape})"

    def __add__(self, other):
        if _is_scalar(other):
            return add_scalar(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if _is_scalar(other):
            return add_scalar(scale(self, -1.0), float(other))
        return sub(other, self)

    def __mul__(self, other):
        if _is_scalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_scalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def _is_scalar(x: Any) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


class Tape:
    """Ordered record of nodes. Nodes are appended in creation order, so the
    list is always topologically sorted."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._recording = True

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, node: Node) -> Node:
        if self._recording:
            node.index = len(self.nodes)
            self.nodes.append(node)
        return node

    @contextlib.contextmanager
    def paused(self) -> Iterator[None]:
        """Compute without recording; nodes created inside are detached."""
        prev = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = prev

    def variable(self, value, name: str) -> Node:
        """A named leaf that :func:`evaluate` rebinds on replay."""
        arr = _as_array(value)
        _check_finite(arr, f"variable {name!r}")
        if any(n.op == "var" and n.name == name for n in self.nodes):
            raise TapeError(f"duplicate variable name {name!r}")
        return self._record(Node(self, arr, "var", name=name))

    def constant(self, value, name: str | None = None) -> Node:
        arr = _as_array(value)
        _check_finite(arr, f"constant {name or ''}".strip())
        return self._record(Node(self, arr, "const", name=name))

    def variables(self) -> dict[str, Node]:
        return {n.name: n for n in self.nodes if n.op == "var"}


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value at {where}")


def _tape_of(items) -> Tape:
    for it in items:
        if isinstance(it, Node):
            return it.tape
    raise TapeError("operation needs at least one Node argument")


def _apply(opname: str, args: Sequence, **attrs) -> Node:
    tape = _tape_of(args)
    parents = []
    for a in args:
        if isinstance(a, Node):
            if a.tape is not tape:
                raise TapeError(f"{opname}: arguments live on different tapes")
            parents.append(a)
        else:
            parents.append(tape.constant(a))
    op = _OPS[opname]
    try:
        # non-finite results are raised as NonFiniteError below
        with np.errstate(all="ignore"):
            value = op.forward(*(p.value for p in parents), **attrs)
    except ValueError as exc:
        shapes = ", ".join(str(p.shape) for p in parents)
        raise ShapeError(
            f"node {len(tape.nodes)} ({opname}) rejected input shapes [{shapes}]: {exc}"
        ) from None
    node = Node(tape, value, opname, parents, attrs)
    tape._record(node)
    if not np.isfinite(value).all():
        raise NonFiniteError(f"node {node.label} ({opname}) produced non-finite values")
    return node


# --------------------------------------------------------------------------
# primitive forward functions


def _sum_to_fwd(a, shape):
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ValueError(f"cannot reduce {a.shape} to {shape}")
    out = a.sum(axis=tuple(range(lead))) if lead else a
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    if out.shape != shape:
        raise ValueError(f"cannot reduce {a.shape} to {shape}")
    return out


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return a @ b


def _softmax_fwd(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _index_grad_fwd(g, key, shape):
    out = np.zeros(shape)
    out[key] = g
    return out


def _expand(g: Node, shape, axis, keepdims) -> Node:
    if axis is None:
        kd = (1,) * len(shape)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        kd = tuple(1 if i in axes else s for i, s in enumerate(shape))
    if not keepdims:
        g = reshape(g, kd)
    return broadcast_to(g, shape)


def _count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[ax] for ax in axes]))


_register("add", lambda a, b: a + b,
          lambda n, g, need: [sum_to(g, n.parents[0].shape) if need[0] else None,
                              sum_to(g, n.parents[1].shape) if need[1] else None])
_register("sub", lambda a, b: a - b,
          lambda n, g, need: [sum_to(g, n.parents[0].shape) if need[0] else None,
                              sum_to(scale(g, -1.0), n.parents[1].shape) if need[1] else None])
_register("mul", lambda a, b: a * b,
          lambda n, g, need: [sum_to(mul(g, n.parents[1]), n.parents[0].shape) if need[0] else None,
                              sum_to(mul(g, n.parents[0]), n.parents[1].shape) if need[1] else None])
_register("div", lambda a, b: a / b,
          lambda n, g, need: [sum_to(div(g, n.parents[1]), n.parents[0].shape) if need[0] else None,
                              sum_to(scale(div(mul(g, n), n.parents[1]), -1.0), n.parents[1].shape)
                              if need[1] else None])
_register("scale", lambda a, c: a * c, lambda n, g, need: [scale(g, n.attrs["c"])])
_register("add_scalar", lambda a, c: a + c, lambda n, g, need: [g])
_register("matmul", _matmul_fwd,
          lambda n, g, need: [matmul(g, transpose(n.parents[1])) if need[0] else None,
                              matmul(transpose(n.parents[0]), g) if need[1] else None])
_register("transpose", lambda a: a.T, lambda n, g, need: [transpose(g)])
_register("relu", lambda a: np.maximum(a, 0.0), lambda n, g, need: [mul(g, step(n.parents[0]))])
_register("step", lambda a: (a > 0).astype(np.float64), lambda n, g, need: [None])
_register("sign", np.sign, lambda n, g, need: [None])
_register("stop_gradient", lambda a: a.copy(), lambda n, g, need: [None])
_register("tanh", np.tanh,
          lambda n, g, need: [mul(g, add_scalar(scale(square(n), -1.0), 1.0))])
_register("exp", np.exp, lambda n, g, need: [mul(g, n)])
_register("log", np.log, lambda n, g, need: [div(g, n.parents[0])])
_register("sqrt", np.sqrt, lambda n, g, need: [scale(div(g, n), 0.5)])
_register("abs", np.abs, lambda n, g, need: [mul(g, sign(n.parents[0]))])
_register("square", np.square, lambda n, g, need: [mul(g, scale(n.parents[0], 2.0))])
_register("sum", lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
          lambda n, g, need: [_expand(g, n.parents[0].shape, n.attrs["axis"], n.attrs["keepdims"])])
_register("mean", lambda a, axis, keepdims: np.mean(a, axis=axis, keepdims=keepdims),
          lambda n, g, need: [scale(_expand(g, n.parents[0].shape, n.attrs["axis"], n.attrs["keepdims"]),
                                    1.0 / _count(n.parents[0].shape, n.attrs["axis"]))])
_register("sum_to", _sum_to_fwd, lambda n, g, need: [broadcast_to(g, n.parents[0].shape)])
_register("broadcast_to", lambda a, shape: np.broadcast_to(a, shape),
          lambda n, g, need: [sum_to(g, n.parents[0].shape)])
_register("reshape", lambda a, shape: a.reshape(shape),
          lambda n, g, need: [reshape(g, n.parents[0].shape)])
_register("softmax", _softmax_fwd,
          lambda n, g, need: [mul(n, sub(g, sum_(mul(g, n), axis=-1, keepdims=True)))])
_register("index", lambda a, key: np.array(a[key], dtype=np.float64),
          lambda n, g, need: [index_grad(g, n.attrs["key"], n.parents[0].shape)])
_register("index_grad", _index_grad_fwd,
          lambda n, g, need: [index(g, n.attrs["key"])])


# --------------------------------------------------------------------------
# public op constructors


def add(a, b) -> Node:
    return _apply("add", (a, b))


def sub(a, b) -> Node:
    return _apply("sub", (a, b))


def mul(a, b) -> Node:
    return _apply("mul", (a, b))


def div(a, b) -> Node:
    return _apply("div", (a, b))


def scale(a: Node, c: float) -> Node:
    return _apply("scale", (a,), c=float(c))


def add_scalar(a: Node, c: float) -> Node:
    return _apply("add_scalar", (a,), c=float(c))


def matmul(a, b) -> Node:
    return _apply("matmul", (a, b))


def transpose(a: Node) -> Node:
    return _apply("transpose", (a,))


def relu(a: Node) -> Node:
    return _apply("relu", (a,))


def step(a: Node) -> Node:
    """Indicator ``a > 0``; zero derivative everywhere."""
    return _apply("step", (a,))


def sign(a: Node) -> Node:
    return _apply("sign", (a,))


def stop_gradient(a: Node) -> Node:
    return _apply("stop_gradient", (a,))


def tanh(a: Node) -> Node:
    return _apply("tanh", (a,))


def exp(a: Node) -> Node:
    return _apply("exp", (a,))


def log(a: Node) -> Node:
    return _apply("log", (a,))


def sqrt(a: Node) -> Node:
    return _apply("sqrt", (a,))


def abs_(a: Node) -> Node:
    return _apply("abs", (a,))


def square(a: Node) -> Node:
    return _apply("square", (a,))


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    return _apply("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    return _apply("mean", (a,), axis=axis, keepdims=keepdims)


def sum_to(a: Node, shape) -> Node:
    if a.shape == tuple(shape):
        return a
    return _apply("sum_to", (a,), shape=tuple(shape))


def broadcast_to(a: Node, shape) -> Node:
    if a.shape == tuple(shape):
        return a
    return _apply("broadcast_to", (a,), shape=tuple(shape))


def reshape(a: Node, shape) -> Node:
    return _apply("reshape", (a,), shape=tuple(shape))


def softmax(a: Node) -> Node:
    """Softmax over the last axis."""
    return _apply("softmax", (a,))


def index(a: Node, key) -> Node:
    return _apply("index", (a,), key=key)


def index_grad(g: Node, key, shape) -> Node:
    return _apply("index_grad", (g,), key=key, shape=tuple(shape))


def sqdist(x, y) -> Node:
    """Squared Euclidean distance along the last axis."""
    return sum_(square(sub(x, y)), axis=-1)


def l1dist(x, y) -> Node:
    return sum_(abs_(sub(x, y)), axis=-1)


def l2dist(x, y) -> Node:
    # offset keeps the derivative finite at coincident points
    return sqrt(add_scalar(sqdist(x, y), L2_EPS))


# --------------------------------------------------------------------------
# differentiation


def _check_scalar(output: Node) -> None:
    if output.value.size != 1 or output.value.ndim > 1:
        raise TapeError(f"gradient needs a scalar output, got shape {output.shape}")


def gradient_as_nodes(output: Node, wrt: Sequence[Node]) -> dict[str, Node]:
    """Emit the backward pass of ``output`` as new nodes on its tape.

    The returned nodes are ordinary tape nodes, so they can be fed to a
    second :func:`gradient` call. Variables the output does not depend on
    get a zero constant.
    """
    _check_scalar(output)
    tape = output.tape
    if output.index < 0:
        raise TapeError("output node is not recorded on a tape")
    for w in wrt:
        if w.tape is not tape or w.index < 0 or w.index > output.index:
            raise TapeError(f"{w!r} is not an input of this tape before the output")

    # nodes lying on some path wrt -> output
    lo = min((w.index for w in wrt), default=output.index)
    span = tape.nodes[lo:output.index + 1]
    reach = {id(w) for w in wrt}
    for n in span:
        if id(n) not in reach and any(id(p) in reach for p in n.parents):
            reach.add(id(n))

    grads: dict[int, Node] = {}
    if id(output) in reach:
        grads[id(output)] = tape.constant(np.ones_like(output.value))
    for n in reversed(span):
        g = grads.get(id(n))
        if g is None or n.op in ("var", "const"):
            continue
        need = tuple(id(p) in reach for p in n.parents)
        if not any(need):
            continue
        for p, pg, nd in zip(n.parents, _OPS[n.op].vjp(n, g, need), need):
            if not nd or pg is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else add(prev, pg)

    out: dict[str, Node] = {}
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = tape.constant(np.zeros_like(w.value))
        out[w.label] = g
    return out


def gradient(output: Node, wrt: Sequence[Node]) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of a scalar node, as plain arrays.

    Uses exactly the computations of :func:`gradient_as_nodes` but leaves the
    tape unchanged.
    """
    with output.tape.paused():
        nodes = gradient_as_nodes(output, wrt)
    return {k: v.value for k, v in nodes.items()}


# --------------------------------------------------------------------------
# replay


def evaluate(tape: Tape, inputs: Mapping[str, Any], outputs: Sequence[Node] | Node):
    """Replay ``tape`` with its variables rebound to ``inputs``.

    Every variable on the tape must be bound. Returns one array per requested
    output (or a single array when one node is passed).
    """
    single = isinstance(outputs, Node)
    outs = [outputs] if single else list(outputs)
    for o in outs:
        if o.tape is not tape or o.index < 0:
            raise TapeError(f"{o!r} is not recorded on this tape")
    stop = max(o.index for o in outs) + 1
    unknown = set(inputs) - set(tape.variables())
    if unknown:
        raise TapeError(f"unknown inputs: {sorted(unknown)}")
    values: list[np.ndarray] = []
    for n in tape.nodes[:stop]:
        if n.op == "var":
            if n.name not in inputs:
                raise TapeError(f"variable {n.name!r} is not bound")
            v = _as_array(inputs[n.name])
            if v.shape != n.shape:
                raise ShapeError(f"variable {n.name!r} bound with shape {v.shape}, tape has {n.shape}")
            _check_finite(v, f"variable {n.name!r}")
        elif n.op == "const":
            v = n.value
        else:
            args = [values[p.index] for p in n.parents]
            try:
                with np.errstate(all="ignore"):
                    v = _OPS[n.op].forward(*args, **n.attrs)
            except ValueError as exc:
                raise ShapeError(f"node {n.label} ({n.op}): {exc}") from None
            if not np.isfinite(v).all():
                raise NonFiniteError(f"node {n.label} ({n.op}) produced non-finite values")
        values.append(v)
    res = [values[o.index] for o in outs]
    return res[0] if single else res
