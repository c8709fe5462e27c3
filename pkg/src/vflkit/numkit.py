"""Dense tensor kernels with tape-based reverse-mode differentiation.

Kernels are plain numpy. A :class:`Tape` records every primitive applied to
tensors created on it; :func:`backward` walks the record in reverse. The same
functions work eagerly on tape-less tensors (and raw arrays), which is how
inference runs.

Shapes are explicit: no broadcasting beyond ``bias_add`` / the row-wise ops,
and batched ``matmul`` requires identical leading dimensions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "id", "name")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None, id: int = -1,
                 name: str | None = None):
        self.data = data
        self.tape = tape
        self.id = id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(dims={self.dims}, dtype={self.data.dtype})"


def tensor(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any]
    out: int


@dataclass(eq=False)
class Tape:
    """Ordered record of primitive applications. Single owner; not thread-safe."""

    nodes: list[_Node] = field(default_factory=list)
    values: dict[int, np.ndarray] = field(default_factory=dict)
    leaves: dict[int, str | None] = field(default_factory=dict)
    consts: set[int] = field(default_factory=set)
    _ids: Any = field(default_factory=itertools.count)

    def _register(self, data: np.ndarray, name: str | None = None) -> Tensor:
        i = next(self._ids)
        data.flags.writeable = False
        self.values[i] = data
        return Tensor(data, self, i, name)

    def leaf(self, data, name: str | None = None) -> Tensor:
        """A differentiable input (a parameter)."""
        t = self._register(np.array(data, copy=True), name)
        self.leaves[t.id] = name
        return t

    def const(self, data) -> Tensor:
        t = self._register(np.array(data, copy=True))
        self.consts.add(t.id)
        return t

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every recorded output from the leaves and constants."""
        vals = {i: self.values[i] for i in itertools.chain(self.leaves, self.consts)}
        for n in self.nodes:
            vals[n.out] = _OPS[n.op].fwd(*(vals[i] for i in n.inputs), **n.attrs)
        return vals

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class _Op:
    fwd: Callable[..., np.ndarray]
    bwd: Callable[..., tuple]  # (g, out, *inputs, **attrs) -> grads per input


_OPS: dict[str, _Op] = {}


def _apply(name: str, inputs: Sequence[Any], **attrs: Any) -> Tensor:
    arrays = [_arr(x) for x in inputs]
    out = np.asarray(_OPS[name].fwd(*arrays, **attrs))
    tapes = {x.tape for x in inputs if isinstance(x, Tensor) and x.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise ContractError("inputs come from different tapes")
    tape = tapes.pop()
    ids = []
    for x, a in zip(inputs, arrays):
        if isinstance(x, Tensor) and x.tape is tape:
            ids.append(x.id)
        else:
            ids.append(tape.const(a).id)
    t = tape._register(out)
    tape.nodes.append(_Node(name, tuple(ids), attrs, t.id))
    return t


def _op(name: str):
    def register(cls):
        _OPS[name] = _Op(cls.fwd, cls.bwd)
        return cls
    return register


def _unbias(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


# -- primitives ---------------------------------------------------------------

@_op("matmul")
class _MatMul:
    @staticmethod
    def fwd(a, b):
        if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
        return np.matmul(a, b)

    @staticmethod
    def bwd(g, out, a, b):
        return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


@_op("add")
class _Add:
    @staticmethod
    def fwd(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add shapes {a.shape} vs {b.shape}")
        return a + b

    @staticmethod
    def bwd(g, out, a, b):
        return g, g


@_op("mul")
class _Mul:
    @staticmethod
    def fwd(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul shapes {a.shape} vs {b.shape}")
        return a * b

    @staticmethod
    def bwd(g, out, a, b):
        return g * b, g * a


@_op("scale")
class _Scale:
    @staticmethod
    def fwd(a, c):
        return a * a.dtype.type(c)

    @staticmethod
    def bwd(g, out, a, c):
        return (g * g.dtype.type(c),)


@_op("bias_add")
class _BiasAdd:
    @staticmethod
    def fwd(x, b):
        if b.ndim != 1 or x.shape[-1] != b.shape[0]:
            raise ShapeError(f"bias {b.shape} does not match rows of {x.shape}")
        return x + b

    @staticmethod
    def bwd(g, out, x, b):
        return g, _unbias(g, b.shape[0])


_GELU_C = math.sqrt(2.0 / math.pi)


@_op("gelu")
class _Gelu:
    # tanh approximation; written with in-place updates to limit temporaries
    @staticmethod
    def _tanh_inner(x, x2):
        t = x2 * 0.044715
        t += 1.0
        t *= x
        t *= _GELU_C
        return np.tanh(t, out=t)

    @staticmethod
    def fwd(x):
        t = _Gelu._tanh_inner(x, x * x)
        t += 1.0
        t *= x
        t *= 0.5
        return t

    @staticmethod
    def bwd(g, out, x):
        x2 = x * x
        t = _Gelu._tanh_inner(x, x2)
        du = x2
        du *= 3 * 0.044715
        du += 1.0
        du *= _GELU_C
        s = t * t
        np.subtract(1.0, s, out=s)
        s *= x
        s *= du
        s *= 0.5
        t += 1.0
        t *= 0.5
        t += s
        t *= g
        return (t,)


@_op("rms_norm")
class _RmsNorm:
    @staticmethod
    def fwd(x, gamma, eps):
        if gamma.shape != x.shape[-1:]:
            raise ShapeError(f"gamma {gamma.shape} vs rows of {x.shape}")
        r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(eps))
        return gamma * (x * r)

    @staticmethod
    def bwd(g, out, x, gamma, eps):
        r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(eps))
        xhat = x * r
        gx = g * gamma
        dgamma = _unbias(g * xhat, gamma.shape[0])
        xhat *= np.mean(gx * xhat, axis=-1, keepdims=True)
        gx -= xhat
        gx *= r
        return gx, dgamma


@_op("row_softmax")
class _Softmax:
    @staticmethod
    # An optional boolean ``keep`` (x's shape, or the last two axes) masks cells to
    # probability 0 before normalising; their gradient is 0 through ``out``.
    def fwd(x, keep=None):
        if keep is not None:
            if keep.shape != x.shape and keep.shape != x.shape[-2:]:
                raise ShapeError(f"mask {keep.shape} vs {x.shape}")
            x = np.where(keep, x, x.dtype.type(-np.inf))
        z = x - np.max(x, axis=-1, keepdims=True)
        np.exp(z, out=z)
        z /= np.sum(z, axis=-1, keepdims=True)
        return z

    @staticmethod
    def bwd(g, out, x, keep=None):
        dx = g - np.sum(g * out, axis=-1, keepdims=True)
        dx *= out
        return (dx,)


@_op("log_softmax")
class _LogSoftmax:
    @staticmethod
    def fwd(x):
        z = x - np.max(x, axis=-1, keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))

    @staticmethod
    def bwd(g, out, x):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)


@_op("mask")
class _Mask:
    # ``keep`` is either x's full shape or (rows, cols) applied to the last two axes;
    # masked cells become -inf.
    @staticmethod
    def fwd(x, keep):
        if keep.shape != x.shape and keep.shape != x.shape[-2:]:
            raise ShapeError(f"mask {keep.shape} vs {x.shape}")
        return np.where(keep, x, x.dtype.type(-np.inf))

    @staticmethod
    def bwd(g, out, x, keep):
        return np.where(keep, g, g.dtype.type(0)), None


@_op("embedding")
class _Embedding:
    @staticmethod
    def fwd(table, ids):
        return table[ids]

    @staticmethod
    def bwd(g, out, table, ids):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return gt, None


@_op("reshape")
class _Reshape:
    @staticmethod
    def fwd(x, shape):
        if math.prod(shape) != x.size:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}")
        return x.reshape(shape)

    @staticmethod
    def bwd(g, out, x, shape):
        return (g.reshape(x.shape),)


@_op("transpose")
class _Transpose:
    @staticmethod
    def fwd(x, axes):
        return np.ascontiguousarray(np.transpose(x, axes))

    @staticmethod
    def bwd(g, out, x, axes):
        return (np.ascontiguousarray(np.transpose(g, np.argsort(axes))),)


@_op("concat")
class _Concat:
    @staticmethod
    def fwd(*xs, axis):
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def bwd(g, out, *xs, axis):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@_op("take")
class _Take:
    @staticmethod
    def fwd(x, idx, axis):
        return np.take(x, idx, axis=axis)

    @staticmethod
    def bwd(g, out, x, idx, axis):
        gx = np.zeros_like(x)
        sl = [slice(None)] * x.ndim
        sl[axis] = idx
        np.add.at(gx, tuple(sl), g)
        return gx, None


@_op("sum")
class _Sum:
    @staticmethod
    def fwd(x):
        return np.asarray(np.sum(x), dtype=x.dtype)

    @staticmethod
    def bwd(g, out, x):
        return (np.full_like(x, g),)


@_op("cross_entropy")
class _CrossEntropy:
    # weighted mean of -log softmax(logits)[target] over rows
    @staticmethod
    def fwd(logits, targets, weights):
        if logits.ndim != 2 or targets.shape != (logits.shape[0],) or weights.shape != targets.shape:
            raise ShapeError("cross_entropy expects (N,V) logits, (N,) targets and weights")
        z = logits - np.max(logits, axis=-1, keepdims=True)
        lsm = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
        picked = lsm[np.arange(len(targets)), targets]
        w = weights.astype(logits.dtype)
        return np.asarray(-np.sum(w * picked) / np.sum(w), dtype=logits.dtype)

    @staticmethod
    def bwd(g, out, logits, targets, weights):
        z = logits - np.max(logits, axis=-1, keepdims=True)
        p = np.exp(z)
        p /= np.sum(p, axis=-1, keepdims=True)
        p[np.arange(len(targets)), targets] -= 1
        w = weights.astype(logits.dtype)
        return p * (w / np.sum(w))[:, None] * g, None, None


# -- public op functions ------------------------------------------------------

def matmul(a, b) -> Tensor:
    return _apply("matmul", (a, b))


def add(a, b) -> Tensor:
    return _apply("add", (a, b))


def mul(a, b) -> Tensor:
    return _apply("mul", (a, b))


def scale(a, c: float) -> Tensor:
    return _apply("scale", (a,), c=float(c))


def bias_add(x, b) -> Tensor:
    return _apply("bias_add", (x, b))


def gelu(x) -> Tensor:
    return _apply("gelu", (x,))


def rms_norm(x, gamma, eps: float = 1e-5) -> Tensor:
    if eps < 0:
        raise ContractError("eps must be non-negative")
    return _apply("rms_norm", (x, gamma), eps=float(eps))


def row_softmax(x, keep: np.ndarray | None = None) -> Tensor:
    if keep is None:
        return _apply("row_softmax", (x,))
    return _apply("row_softmax", (x,), keep=np.asarray(keep, dtype=bool))


def log_softmax(x) -> Tensor:
    return _apply("log_softmax", (x,))


def mask(x, keep: np.ndarray) -> Tensor:
    return _apply("mask", (x, np.asarray(keep, dtype=bool)))


def embedding(table, ids) -> Tensor:
    return _apply("embedding", (table, np.asarray(ids, dtype=np.int64)))


def reshape(x, shape: Sequence[int]) -> Tensor:
    return _apply("reshape", (x,), shape=tuple(int(s) for s in shape))


def transpose(x, axes: Sequence[int]) -> Tensor:
    return _apply("transpose", (x,), axes=tuple(axes))


def concat(xs: Sequence[Any], axis: int = 0) -> Tensor:
    return _apply("concat", tuple(xs), axis=axis)


def take(x, idx, axis: int = 0) -> Tensor:
    return _apply("take", (x, np.asarray(idx, dtype=np.int64)), axis=axis)


def sum_all(x) -> Tensor:
    return _apply("sum", (x,))


def cross_entropy(logits, targets, weights) -> Tensor:
    return _apply("cross_entropy", (logits, np.asarray(targets, dtype=np.int64),
                                    np.asarray(weights)))


def backward(tape: Tape, loss: Tensor) -> dict[str | int, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every leaf on ``tape``.

    Keys are leaf names (ids for unnamed leaves). Leaves the loss does not
    depend on get zero arrays.
    """
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"loss must be a scalar, got dims {loss.dims}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for n in reversed(tape.nodes):
        g = grads.pop(n.out, None)
        if g is None:
            continue
        ins = [tape.values[i] for i in n.inputs]
        for i, gi in zip(n.inputs, _OPS[n.op].bwd(g, tape.values[n.out], *ins, **n.attrs)):
            if gi is None or i in tape.consts:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    out: dict[str | int, np.ndarray] = {}
    for i, name in tape.leaves.items():
        g = grads.get(i)
        out[name if name is not None else i] = np.zeros_like(tape.values[i]) if g is None else g
    return out


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              step: int | None = None) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not modified."""
    t = state.step + 1 if step is None else step
    if t < 1:
        raise ContractError("step must be >= 1")
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad for {name}: {g.shape} vs param {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"optimizer state for {name} does not match {p.shape}")
        m = dt(beta1) * m + dt(1 - beta1) * g
        v = dt(beta2) * v + dt(1 - beta2) * (g * g)
        mhat = m / dt(1 - beta1 ** t)
        vhat = v / dt(1 - beta2 ** t)
        new_p[name] = p - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


def check_finite(x, what: str = "tensor") -> None:
    a = _arr(x)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {what}")
