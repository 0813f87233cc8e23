"""Small reverse-mode differentiation engine over dense float64 arrays.

Values live in numpy arrays (1-D or 2-D). Every primitive appends a node to
the :class:`Tape` of its operands; :meth:`Tape.backward` replays the recorded
vector-Jacobian products in reverse order.

Example
-------
>>> tape = Tape()
>>> x = tape.leaf([3.0])
>>> y = x * x
>>> tape.backward(y, [1.0])[x]
array([6.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteAdjointError",
    "TapeReleasedError",
    "Tensor",
    "Tape",
    "forward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "silu",
    "floor_zero",
    "concat",
    "slice_cols",
    "sum_squares",
    "mlp_apply",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive."""


class NonFiniteAdjointError(FloatingPointError):
    """An adjoint became NaN or infinite during the reverse pass."""


class TapeReleasedError(RuntimeError):
    """Backward was requested on a tape whose buffers were released."""


class Tensor:
    """A node on a tape: a value plus the recipe for pulling adjoints back."""

    __slots__ = ("value", "tape", "index", "requires_grad", "op", "parents", "vjp")

    def __init__(self, value, tape, index, requires_grad, op, parents=(), vjp=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. A tape can be replayed backward any number of
    times with different seeds until :meth:`release` is called.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._released = False

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        if arr.ndim not in (1, 2):
            raise ShapeError(f"leaf: only 1-D or 2-D values are supported, got shape {arr.shape}")
        return self._push(arr, requires_grad, "leaf")

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def _push(self, value, requires_grad, op, parents=(), vjp=None) -> Tensor:
        node = Tensor(value, self, len(self.nodes), requires_grad, op, parents, vjp)
        self.nodes.append(node)
        return node

    def release(self) -> None:
        """Drop recorded closures; further backward calls raise."""
        for node in self.nodes:
            node.vjp = None
            node.parents = ()
        self._released = True

    def backward(self, output: Tensor, seed, leaves: Sequence[Tensor] | None = None) -> dict:
        """Vector-Jacobian product of ``output`` with ``seed``.

        Returns a dict mapping each differentiable leaf (or only ``leaves``
        when given) to its gradient. Leaves the output does not depend on get
        zero gradients.
        """
        if self._released:
            raise TapeReleasedError("tape was released; record the computation again")
        if output.tape is not self:
            raise ValueError("output tensor belongs to a different tape")
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")

        adjoints: dict[int, np.ndarray] = {output.index: seed.copy()}
        for node in reversed(self.nodes[: output.index + 1]):
            if node.vjp is None:
                continue
            adj = adjoints.pop(node.index, None)
            if adj is None:
                continue
            if not np.all(np.isfinite(adj)):
                raise NonFiniteAdjointError(f"non-finite adjoint at node {node.index} ({node.op})")
            for parent, grad in zip(node.parents, node.vjp(adj)):
                if not (parent.requires_grad or parent.vjp is not None):
                    continue
                prev = adjoints.get(parent.index)
                adjoints[parent.index] = grad if prev is None else prev + grad

        wanted = leaves if leaves is not None else [n for n in self.nodes if n.op == "leaf" and n.requires_grad]
        grads = {}
        for leaf in wanted:
            g = adjoints.get(leaf.index)
            grads[leaf] = np.zeros_like(leaf.value) if g is None else g
        return grads


def forward(program: Callable[..., Tensor], leaves: Sequence) -> tuple[Tensor, Tape, list[Tensor]]:
    """Run ``program`` on fresh differentiable leaves and return (output, tape, leaves)."""
    tape = Tape()
    nodes = [tape.leaf(v) for v in leaves]
    out = program(*nodes)
    if not isinstance(out, Tensor):
        raise TypeError("program must return a Tensor")
    return out, tape, nodes


def _needs(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t.vjp is not None for t in tensors)


def _same_tape(op: str, *tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError(f"{op}: operands recorded on different tapes")
    return tape


def _push(op, value, parents, vjp) -> Tensor:
    tape = _same_tape(op, *parents)
    if _needs(*parents):
        return tape._push(value, False, op, parents, vjp)
    return tape._push(value, False, op)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def vjp(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _push("matmul", out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may be a 1-D row added to every row of 2-D ``a``."""
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return _push("add", av + bv, (a, b), lambda g: (g, g))
    if av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        return _push("add", av + bv, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {av.shape} and {bv.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _push("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _push("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _push("scale", a.value * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _push("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def silu(a: Tensor) -> Tensor:
    x = a.value
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _push("silu", x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def floor_zero(a: Tensor) -> Tensor:
    """max(a, 0) with subgradient 0 where the floor is active."""
    mask = a.value > 0.0
    return _push("floor_zero", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    vals = [t.value for t in tensors]
    ndims = {v.ndim for v in vals}
    if len(ndims) != 1:
        raise ShapeError(f"concat: mixed ranks {[v.shape for v in vals]}")
    ax = axis % vals[0].ndim
    other = {tuple(np.delete(v.shape, ax)) for v in vals}
    if len(other) != 1:
        raise ShapeError(f"concat: shapes {[v.shape for v in vals]} disagree off axis {ax}")
    out = np.concatenate(vals, axis=ax)
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _push("concat", out, tuple(tensors), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-D tensor (entries of a 1-D one)."""
    n = a.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for shape {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _push("slice", a.value[..., start:stop].copy(), (a,), vjp)


def sum_squares(a: Tensor, weight: float = 1.0) -> Tensor:
    """weight * sum(a**2) as a length-1 tensor."""
    x = a.value
    w = float(weight)
    return _push("sum_squares", np.array([w * np.sum(x * x)]), (a,), lambda g: (2.0 * w * g[0] * x,))


_ACTIVATIONS = {"tanh": tanh, "silu": silu}


def mlp_apply(params, x: Tensor, activation: str = "tanh") -> Tensor:
    """One-hidden-layer perceptron ``act(x W1 + b1) W2 + b2`` on the rows of ``x``.

    ``params`` is a mapping with tensors ``W1`` (in, hidden), ``b1`` (hidden,),
    ``W2`` (hidden, out) and ``b2`` (out,). Plain arrays are recorded as
    constants on the tape of ``x``.
    """
    tape = x.tape
    p = {k: v if isinstance(v, Tensor) else tape.constant(v) for k, v in params.items()}
    n_in = p["W1"].shape[0]
    if x.shape[-1] != n_in:
        raise ShapeError(f"mlp_apply: input width {x.shape[-1]} != declared input dimension {n_in}")
    if p["W2"].shape[0] != p["W1"].shape[1]:
        raise ShapeError(f"mlp_apply: hidden sizes disagree {p['W1'].shape} vs {p['W2'].shape}")
    try:
        act = _ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    squeeze = x.value.ndim == 1
    h = matmul(x, p["W1"]) if not squeeze else _vec_matmul(x, p["W1"])
    h = act(add(h, p["b1"]))
    out = matmul(h, p["W2"]) if not squeeze else _vec_matmul(h, p["W2"])
    return add(out, p["b2"])


def _vec_matmul(v: Tensor, w: Tensor) -> Tensor:
    """Row vector times matrix, for 1-D inputs."""
    vv, wv = v.value, w.value
    if wv.ndim != 2 or vv.shape[0] != wv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {vv.shape} and {wv.shape}")
    return _push("matmul", vv @ wv, (v, w), lambda g: (wv @ g, np.outer(vv, g)))
