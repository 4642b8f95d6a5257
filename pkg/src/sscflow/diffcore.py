"""Small reverse-mode differentiation engine over dense 2-D float64 matrices.

Every value is a ``Tensor`` of shape ``(rows, cols)``.  Operations whose
inputs live on a ``Tape`` are appended to it in execution order; ``backward``
walks the tape in reverse and accumulates adjoints into the leaves.

    tape = Tape()
    w = tape.leaf(np.ones((2, 1)))
    x = tape.constant([[1.0, 2.0]])
    loss = mean(square(x @ w))
    grads = tape.backward(loss)
    grads[w]  # d loss / d w
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class DimensionError(ValueError):
    """Operand shapes do not conform to the operation."""


class DomainError(ValueError):
    """Operand lies outside the mathematical domain of the operation."""


class ContractError(RuntimeError):
    """API misuse, e.g. differentiating a non-scalar."""


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got ndim={arr.ndim}")
    return arr


class Tensor:
    """Immutable matrix value, optionally recorded on a tape."""

    __slots__ = ("value", "tape", "requires_grad", "_backward", "_parents", "name")
    __array_priority__ = 100  # keep ndarray <op> Tensor dispatching to Tensor

    def __init__(self, value, tape: "Tape | None" = None, requires_grad: bool = False,
                 name: str | None = None):
        self.value = _as_matrix(value)
        self.value.flags.writeable = False
        self.tape = tape
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass
class Tape:
    """Ordered record of the operations of one differentiation pass."""

    nodes: list[Tensor] = field(default_factory=list)

    def leaf(self, value, name: str | None = None) -> Tensor:
        """A differentiable input (a trainable parameter)."""
        return Tensor(value, tape=self, requires_grad=True, name=name)

    def constant(self, value, name: str | None = None) -> Tensor:
        return Tensor(value, tape=self, requires_grad=False, name=name)

    def record(self, node: Tensor) -> Tensor:
        self.nodes.append(node)
        return node

    def apply(self, kind: str, *inputs, **kwargs) -> Tensor:
        """Dispatch a primitive by name, e.g. ``tape.apply("exp", x)``."""
        try:
            fn = PRIMITIVES[kind]
        except KeyError:
            raise ContractError(f"unknown primitive {kind!r}") from None
        args = [t if isinstance(t, Tensor) else self.constant(t) for t in inputs]
        return fn(*args, **kwargs)

    def backward(self, loss: Tensor) -> "Gradients":
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        grads = Gradients()
        if not loss.requires_grad:
            return grads
        # reverse recording order is a valid reverse topological order
        for node in reversed(self.nodes):
            adj = adjoints.pop(id(node), None)
            if adj is None:
                continue
            parent_adjs = node._backward(adj)
            for parent, padj in zip(node._parents, parent_adjs):
                if padj is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + padj
                else:
                    adjoints[key] = padj
        for node_id, adj in adjoints.items():
            grads._by_id[node_id] = adj
        return grads


class Gradients(Mapping):
    """Leaf tensor -> gradient array; leaves that got no gradient map to zeros."""

    def __init__(self):
        self._by_id: dict[int, np.ndarray] = {}

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        return self._by_id.get(id(leaf), np.zeros(leaf.shape))

    def __iter__(self):
        return iter(self._by_id)

    def __len__(self) -> int:
        return len(self._by_id)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, tape=like.tape if like is not None else None)


def _node(value: np.ndarray, parents: Iterable[Tensor],
          backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    parents = tuple(parents)
    tape = _tape_of(*parents)
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.tape = tape
    out.requires_grad = needs
    out._backward = None
    out._parents = ()
    out.name = None
    if needs:
        out._parents = parents
        out._backward = backward
        if tape is not None:
            tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[1] == shape[1]:
        return grad.sum(axis=0, keepdims=True)
    if shape == (1, 1):
        return grad.sum(keepdims=True).reshape(1, 1)
    if shape[1] == 1 and grad.shape[0] == shape[0]:
        return grad.sum(axis=1, keepdims=True)
    raise DimensionError(f"cannot reduce gradient {grad.shape} to {shape}")


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    # row-wise bias (1 x cols), column (rows x 1) and scalar (1 x 1) broadcasting only
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    for big, small in ((sa, sb), (sb, sa)):
        if small == (1, 1):
            return
        if small[0] == 1 and small[1] == big[1]:
            return
        if small[1] == 1 and small[0] == big[0]:
            return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_elementwise(a, b, "add")
    out_val = a.value + b.value
    sa, sb = a.shape, b.shape
    return _node(out_val, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def hadamard(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_elementwise(a, b, "hadamard")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    if np.any(av <= 0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(av), (a,), lambda g: (g / av,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    av = a.value
    d = np.where(av > 0, 1.0, slope)
    return _node(av * d, (a,), lambda g: (g * d,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * g * av,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    av = a.value
    if axis is None:
        out = av.sum().reshape(1, 1)
    elif axis in (0, 1):
        out = av.sum(axis=axis, keepdims=True)
    else:
        raise DimensionError(f"sum: axis must be None, 0 or 1, got {axis}")
    return _node(out, (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def softmax_rowwise(a: Tensor) -> Tensor:
    av = a.value
    shifted = av - av.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), back)


def logsumexp_rowwise(a: Tensor) -> Tensor:
    """log(sum(exp(a), axis=1)) with max-shift; returns rows x 1."""
    av = a.value
    m = av.max(axis=1, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=1, keepdims=True)
    out = m + np.log(s)
    w = e / s
    return _node(out, (a,), lambda g: (g * w,))


def concat_cols(*parts: Tensor) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols needs at least one operand")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise DimensionError(f"concat_cols: row mismatch {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)
    out = np.concatenate([p.value for p in parts], axis=1)
    return _node(out, parts,
                 lambda g: tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts))))


def split_cols(a: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    """Select the listed columns (in order) of ``a``."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[1])):
        raise DimensionError(f"split_cols: bad column index for shape {a.shape}")
    cols = a.shape[1]

    def back(g):
        full = np.zeros((g.shape[0], cols))
        np.add.at(full, (slice(None), idx), g)
        return (full,)

    return _node(a.value[:, idx], (a,), back)


def rows(a: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    """Select rows; used for per-row masking of losses."""
    idx = np.asarray(index, dtype=np.intp)
    n = a.shape[0]

    def back(g):
        full = np.zeros((n, a.shape[1]))
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.value[idx], (a,), back)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "scale": scale,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "leaky_relu": leaky_relu,
    "sum": sum,
    "mean": mean,
    "square": square,
    "softmax_rowwise": softmax_rowwise,
    "logsumexp_rowwise": logsumexp_rowwise,
    "concat_cols": concat_cols,
    "split_cols": split_cols,
    "rows": rows,
}


def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.value)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Returns new arrays; inputs are not mutated."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        new[name] = p - state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return new, state
