"""
Small reverse-mode differentiation engine for dense networks.

Values are numpy float64 arrays. A :class:`GradientTape` records every
operation applied to :class:`Var` objects together with a closure that
maps the gradient of the result to gradients of its inputs. Calling
:func:`backward` replays the tape in reverse exactly once.

Batched inputs follow the row convention: an input of shape ``(N, in)``
is mapped to ``(N, out)`` by ``x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "identity", "softmax")


class AutodiffError(RuntimeError):
    """Raised on misuse of a tape or on invalid numerical input."""


class DimensionError(ValueError):
    """Input or parameter shapes do not chain."""


# ---------------------------------------------------------------------------
# Tape and variables
# ---------------------------------------------------------------------------


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value: np.ndarray, tape: "GradientTape", index: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_lift(self.tape, other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    shape: tuple[int, ...]


class GradientTape:
    """Records operations for one reverse pass.

    Parameters are registered by name with :meth:`param`; registering the
    same name twice returns the same leaf, so a network applied at several
    frames accumulates its gradient in one place.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._params: dict[str, Var] = {}
        self.consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def _check_open(self) -> None:
        if self.consumed:
            raise AutodiffError("tape already consumed by backward(); record a new one")

    def variable(self, value, name: str | None = None) -> Var:
        """Register a leaf (input or constant that needs a gradient)."""
        self._check_open()
        arr = np.asarray(value, dtype=np.float64)
        self._nodes.append(_Node((), None, arr.shape))
        return Var(arr, self, len(self._nodes) - 1, name)

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self._params:
            return self._params[name]
        var = self.variable(value, name=name)
        self._params[name] = var
        return var

    @property
    def params(self) -> dict[str, Var]:
        return dict(self._params)

    def record(self, value: np.ndarray, parents: Sequence[Var], vjp) -> Var:
        self._check_open()
        self._nodes.append(_Node(tuple(p.index for p in parents), vjp, value.shape))
        return Var(value, self, len(self._nodes) - 1)


class Gradients(dict):
    """Mapping ``parameter name -> gradient`` plus lookup of any recorded var."""

    def __init__(self, by_index: list, params: dict[str, Var]):
        super().__init__()
        self._by_index = by_index
        for name, var in params.items():
            g = by_index[var.index]
            self[name] = np.zeros(var.shape) if g is None else g

    def of(self, var: Var) -> np.ndarray:
        g = self._by_index[var.index]
        return np.zeros(var.shape) if g is None else g


def backward(tape: GradientTape, output_grad, output: Var | None = None) -> Gradients:
    """Reverse pass: gradients of ``sum(output * output_grad)``.

    ``output_grad`` is either an array matching ``output`` (the last
    recorded var by default) or a dict ``{var: grad}`` seeding several
    outputs at once. The tape cannot be replayed afterwards.
    """
    tape._check_open()
    if not tape._nodes:
        raise AutodiffError("empty tape")
    grads: list[np.ndarray | None] = [None] * len(tape._nodes)
    if isinstance(output_grad, dict):
        seeds = output_grad.items()
    else:
        if output is None:
            output = Var(None, tape, len(tape._nodes) - 1)  # type: ignore[arg-type]
        seeds = [(output, output_grad)]
    for var, g in seeds:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != tape._nodes[var.index].shape:
            raise DimensionError(
                f"output gradient shape {g.shape} != output shape {tape._nodes[var.index].shape}"
            )
        grads[var.index] = g if grads[var.index] is None else grads[var.index] + g

    for i in range(len(tape._nodes) - 1, -1, -1):
        node = tape._nodes[i]
        g = grads[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    tape.consumed = True
    return Gradients(grads, tape._params)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def _lift(tape: GradientTape, x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.variable(x)


def _tape_of(*xs) -> GradientTape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise AutodiffError("operation needs at least one recorded Var")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    out = a.value + b.value
    sa, sb = a.shape, b.shape
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    """Elementwise product with broadcasting."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape.record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim > 2 or bv.ndim > 2:
        raise DimensionError("matmul supports 1-D and 2-D operands only")

    def vjp(g):
        a2 = av if av.ndim == 2 else av[None, :]
        b2 = bv if bv.ndim == 2 else bv[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(av.shape)
        gb = (a2.T @ g2).reshape(bv.shape)
        return ga, gb

    return tape.record(av @ bv, (a, b), vjp)


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape.record(y, (a,), lambda g: (g * (1.0 - y * y),))


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * av * g,))


def log(a: Var) -> Var:
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def clip(a: Var, lo: float, hi: float) -> Var:
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return a.tape.record(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def sum_(a: Var, axis=None) -> Var:
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape.record(np.asarray(a.value.sum(axis=axis)), (a,), vjp)


def mean(a: Var) -> Var:
    n = a.value.size
    return mul(sum_(a), 1.0 / n)


def take(a: Var, key) -> Var:
    """Basic indexing/slicing."""
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[key] += g
        return (out,)

    return a.tape.record(np.array(a.value[key]), (a,), vjp)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1) -> Var:
    tape = _tape_of(*xs)
    vs = [_lift(tape, x) for x in xs]
    sizes = [v.shape[axis] for v in vs]
    cuts = np.cumsum(sizes)[:-1]
    return tape.record(
        np.concatenate([v.value for v in vs], axis=axis),
        vs,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def batched_matvec(mats, vecs) -> Var:
    """``out[n] = mats[n] @ vecs[n]`` for stacks ``(N, k, m)`` and ``(N, m)``."""
    tape = _tape_of(mats, vecs)
    mats, vecs = _lift(tape, mats), _lift(tape, vecs)
    mv, vv = mats.value, vecs.value
    out = np.einsum("nij,nj->ni", mv, vv)
    return tape.record(
        out,
        (mats, vecs),
        lambda g: (g[:, :, None] * vv[:, None, :], np.einsum("nij,ni->nj", mv, g)),
    )


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_op(a: Var, axis: int = -1) -> Var:
    p = softmax(a.value, axis=axis)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return a.tape.record(p, (a,), vjp)


# ---------------------------------------------------------------------------
# Dense networks
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    """Fully connected network; parameters are named ``{name}.{k}.weight|bias``."""

    layers: list[Layer]
    name: str = "net"

    def __post_init__(self) -> None:
        if not self.layers:
            raise DimensionError("network needs at least one layer")
        for k, layer in enumerate(self.layers):
            layer.weight = np.asarray(layer.weight, dtype=np.float64)
            layer.bias = np.asarray(layer.bias, dtype=np.float64)
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise DimensionError(f"{self.name} layer {k}: bias shape {layer.bias.shape} "
                                     f"does not match weight {layer.weight.shape}")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"{self.name} layer {k}: unknown activation {layer.activation!r}")
            if layer.activation == "softmax" and k != len(self.layers) - 1:
                raise ValueError(f"{self.name} layer {k}: softmax only allowed on the final layer")
            if k and self.layers[k - 1].out_dim != layer.in_dim:
                raise DimensionError(
                    f"{self.name} layer {k} expects {layer.in_dim} inputs but layer {k - 1} "
                    f"produces {self.layers[k - 1].out_dim}"
                )
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValueError(f"{self.name} layer {k}: non-finite parameters")

    @classmethod
    def create(cls, sizes: Sequence[int], rng: np.random.Generator, name: str = "net",
               hidden: str = "tanh", output: str = "identity") -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (n_in + n_out))
            act = output if k == len(sizes) - 2 else hidden
            layers.append(Layer(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out), act))
        return cls(layers, name)

    @classmethod
    def zeros(cls, sizes: Sequence[int], name: str = "net", hidden: str = "tanh",
              output: str = "identity") -> "DenseNet":
        layers = [
            Layer(np.zeros((n_out, n_in)), np.zeros(n_out), output if k == len(sizes) - 2 else hidden)
            for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        return cls(layers, name)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to the parameter arrays (in-place updates stick)."""
        params = {}
        for k, layer in enumerate(self.layers):
            params[f"{self.name}.{k}.weight"] = layer.weight
            params[f"{self.name}.{k}.bias"] = layer.bias
        return params

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
                        self.name)


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(x)
    if activation == "softmax":
        return softmax(x)
    return x


def net_forward(net: DenseNet, x, tape: GradientTape | None = None):
    """Evaluate ``net`` on a vector ``(in,)`` or a batch ``(N, in)``.

    Without a tape, plain arrays go in and out. With a tape, weights are
    registered as named parameters and the result is a :class:`Var`.
    """
    xv = x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
    if xv.shape[-1] != net.in_dim:
        raise DimensionError(
            f"{net.name} layer 0 expects input of size {net.in_dim}, got {xv.shape[-1]}"
        )
    if tape is None and not isinstance(x, Var):
        h = xv
        for layer in net.layers:
            h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        return h

    tape = tape if tape is not None else x.tape
    h = x if isinstance(x, Var) else tape.variable(xv)
    for k, layer in enumerate(net.layers):
        w = tape.param(f"{net.name}.{k}.weight", layer.weight)
        b = tape.param(f"{net.name}.{k}.bias", layer.bias)
        h = matmul(h, transpose(w)) + b
        if layer.activation == "tanh":
            h = tanh(h)
        elif layer.activation == "softmax":
            h = softmax_op(h)
    return h


def transpose(a: Var) -> Var:
    return a.tape.record(a.value.T, (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments plus a step learning-rate schedule.

    The rate at epoch ``e`` is ``base_lr * gamma ** (e // step_epochs)``,
    which is the same as multiplying by ``gamma`` at every positive
    multiple of ``step_epochs``.
    """

    lr: float
    step_epochs: int = 0
    gamma: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    base_lr: float | None = None
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.step_epochs < 0:
            raise ValueError("step_epochs must be >= 0")
        if self.base_lr is None:
            self.base_lr = self.lr


def optimizer_step(state: OptimizerState, params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One Adam update, applied in place to ``params`` (also returned)."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise AutodiffError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def scheduler_step(state: OptimizerState, epoch: int) -> float:
    """Set and return the learning rate for ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if state.step_epochs:
        state.lr = state.base_lr * state.gamma ** (epoch // state.step_epochs)
    return state.lr


def global_params(nets: Iterable[DenseNet]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for net in nets:
        out.update(net.parameters())
    return out
