"""Reverse-mode automatic differentiation over dense float64 tensors.

A deliberately small engine: twelve forward primitives, an explicit tape of
primitive applications, and a reverse pass that walks the tape backwards.
It is just enough to express and train the forecasting network in this
package. Tensors are immutable; the tape's creation order is topological by
construction, which makes the backward pass a single reverse sweep.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

ELU_ALPHA = 1.0
LAYER_NORM_EPS = 1e-5

PRIMITIVES = (
    "matmul",
    "add",
    "mul",
    "concat",
    "slice",
    "elu",
    "sigmoid",
    "tanh",
    "softmax_lastdim",
    "layer_norm_lastdim",
    "dropout_with_mask",
    "embedding_lookup",
)


class ShapeMismatch(ValueError):
    """An op was applied to tensors whose shapes do not conform."""

    def __init__(self, op: str, shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteInput(ValueError):
    """A tensor handed to an op (or constructor) contains NaN or Inf."""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite values in input to {where}")


class GraphError(ValueError):
    """Backward was asked something the recorded graph cannot answer."""


_leaf_counter = 0


def _next_leaf_name() -> str:
    global _leaf_counter
    _leaf_counter += 1
    return f"leaf{_leaf_counter}"


class Tensor:
    """Immutable dense float64 array, optionally tracked for gradients.

    Leaves that require gradients always carry a name (auto-assigned when
    not given); gradient maps returned by :func:`backward` are keyed by it.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _validate: bool = True, _auto_name: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _validate and not np.all(np.isfinite(arr)):
            raise NonFiniteInput(name or "Tensor")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "requires_grad", bool(requires_grad))
        if requires_grad and name is None and _auto_name:
            name = _next_leaf_name()
        object.__setattr__(self, "name", name)

    def __setattr__(self, key, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class _Entry:
    __slots__ = ("op", "inputs", "output", "grad_fn")

    def __init__(self, op, inputs, output, grad_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of primitive applications.

    Entries are appended as results are produced, so every entry's inputs
    were produced by an earlier entry or are leaves: creation order is a
    topological order, and the reverse sweep in :func:`backward` is valid.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __len__(self):
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []
_VALIDATE_STACK: list[bool] = [True]


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class fast_math:
    """Context that skips per-op finiteness scans on the training hot path."""

    def __enter__(self):
        _VALIDATE_STACK.append(False)
        return self

    def __exit__(self, *exc):
        _VALIDATE_STACK.pop()
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            grad_fn: Callable[[np.ndarray], list[np.ndarray | None]]) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, _validate=False, _auto_name=False)
    tape = active_tape()
    if tape is not None and requires:
        tape.entries.append(_Entry(op, tuple(inputs), out, grad_fn))
    return out


def _check_inputs(op: str, inputs: Sequence[Tensor]):
    if _VALIDATE_STACK[-1]:
        for t in inputs:
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteInput(op)


# ---------------------------------------------------------------------------
# primitive forwards + gradients

def _promote(a: np.ndarray, side: str) -> tuple[np.ndarray, bool]:
    # 1-D operands get a singleton row/column so every matmul is >=2-D
    if a.ndim == 1:
        return (a[None, :], True) if side == "left" else (a[:, None], True)
    return a, False


def _matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False):
    A, a_vec = _promote(a.data, "left")
    B, b_vec = _promote(b.data, "right")
    if transpose_a:
        A = A.swapaxes(-1, -2)
    if transpose_b:
        B = B.swapaxes(-1, -2)
    if A.ndim > 3 or B.ndim > 3:
        raise ShapeMismatch("matmul", (a.shape, b.shape), "rank > 3 unsupported")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeMismatch("matmul", (a.shape, b.shape), "inner dimensions differ")
    if A.ndim == 3 and B.ndim == 3 and A.shape[0] != B.shape[0]:
        raise ShapeMismatch("matmul", (a.shape, b.shape), "batch dimensions differ")
    raw = np.matmul(A, B)
    raw_shape = raw.shape

    def grad_fn(g: np.ndarray) -> list[np.ndarray | None]:
        G = np.asarray(g).reshape(raw_shape)
        dA = np.matmul(G, B.swapaxes(-1, -2))
        dB = np.matmul(A.swapaxes(-1, -2), G)
        if A.ndim == 3 and B.ndim == 2:
            dB = dB.sum(axis=0)
        if A.ndim == 2 and B.ndim == 3:
            dA = dA.sum(axis=0)
        if transpose_a:
            dA = dA.swapaxes(-1, -2)
        if transpose_b:
            dB = dB.swapaxes(-1, -2)
        return [dA.reshape(a.shape), dB.reshape(b.shape)]

    out = raw
    if a_vec:
        out = out.reshape(out.shape[:-2] + (out.shape[-1],))
    if b_vec:
        out = out.reshape(out.shape[:-1])
    return out, grad_fn


def _elementwise_binary(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, (a.shape, b.shape), "not broadcastable") from None
    if op == "add":
        out = a.data + b.data

        def grad_fn(g):
            ga = _unbroadcast(g, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g, b.shape) if b.requires_grad else None
            return [ga, gb]
    else:
        out = a.data * b.data

        def grad_fn(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return [ga, gb]

    return out, grad_fn


def _concat(inputs: Sequence[Tensor], axis: int):
    shapes = [t.shape for t in inputs]
    nd = inputs[0].ndim
    ax = axis if axis >= 0 else axis + nd
    for s in shapes[1:]:
        if len(s) != nd or any(s[i] != shapes[0][i] for i in range(nd) if i != ax):
            raise ShapeMismatch("concat", shapes, f"axis={axis}")
    out = np.concatenate([t.data for t in inputs], axis=ax)
    sizes = [s[ax] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        grads = []
        for i, t in enumerate(inputs):
            sl = [slice(None)] * nd
            sl[ax] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)] if t.requires_grad else None)
        return grads

    return out, grad_fn


def _slice(a: Tensor, key):
    try:
        out = a.data[key]
    except IndexError as e:
        raise ShapeMismatch("slice", (a.shape,), str(e)) from None

    def grad_fn(g):
        z = np.zeros(a.shape)
        z[key] = g
        return [z]

    return out, grad_fn


def _elu(a: Tensor):
    x = a.data
    neg = ELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)

    def grad_fn(g):
        return [g * np.where(x > 0, 1.0, neg + ELU_ALPHA)]

    return out, grad_fn


def _sigmoid(a: Tensor):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return [g * out * (1.0 - out)]

    return out, grad_fn


def _tanh(a: Tensor):
    out = np.tanh(a.data)

    def grad_fn(g):
        return [g * (1.0 - out * out)]

    return out, grad_fn


def _softmax_lastdim(a: Tensor):
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return [out * (g - dot)]

    return out, grad_fn


def _layer_norm_lastdim(a: Tensor):
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    out = (x - mu) * inv

    def grad_fn(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return [inv * (g - gm - out * gy)]

    return out, grad_fn


def _dropout_with_mask(a: Tensor, mask: Tensor):
    if a.shape != mask.shape:
        raise ShapeMismatch("dropout_with_mask", (a.shape, mask.shape))
    m = mask.data
    out = a.data * m

    def grad_fn(g):
        return [g * m, None]

    return out, grad_fn


def _embedding_lookup(table: Tensor, indices):
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch("embedding_lookup", (table.shape,), "indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch("embedding_lookup", (table.shape,),
                            f"index out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def grad_fn(g):
        z = np.zeros(table.shape)
        np.add.at(z, idx, g)
        return [z]

    return out, grad_fn


def apply_primitive(op: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply one of the twelve primitives, recording it on the active tape.

    Shape conformance is always checked (errors name the op and the
    offending shapes); finiteness of the inputs is checked unless running
    inside :class:`fast_math`.
    """
    if op not in PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}")
    inputs = tuple(inputs)
    _check_inputs(op, inputs)
    if op == "matmul":
        data, grad_fn = _matmul(*inputs, **kwargs)
    elif op in ("add", "mul"):
        data, grad_fn = _elementwise_binary(op, *inputs)
    elif op == "concat":
        data, grad_fn = _concat(inputs, kwargs.get("axis", -1))
    elif op == "slice":
        data, grad_fn = _slice(inputs[0], kwargs["key"])
    elif op == "elu":
        data, grad_fn = _elu(inputs[0])
    elif op == "sigmoid":
        data, grad_fn = _sigmoid(inputs[0])
    elif op == "tanh":
        data, grad_fn = _tanh(inputs[0])
    elif op == "softmax_lastdim":
        data, grad_fn = _softmax_lastdim(inputs[0])
    elif op == "layer_norm_lastdim":
        data, grad_fn = _layer_norm_lastdim(inputs[0])
    elif op == "dropout_with_mask":
        data, grad_fn = _dropout_with_mask(*inputs)
    else:
        data, grad_fn = _embedding_lookup(inputs[0], kwargs["indices"])
    return _record(op, inputs, data, grad_fn)


# thin named wrappers: single dispatch point stays apply_primitive

def matmul(a, b, transpose_a=False, transpose_b=False):
    return apply_primitive("matmul", (a, b), transpose_a=transpose_a,
                           transpose_b=transpose_b)


def add(a, b):
    return apply_primitive("add", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def concat(tensors, axis=-1):
    return apply_primitive("concat", tensors, axis=axis)


def slice_(a, key):
    return apply_primitive("slice", (a,), key=key)


def elu(a):
    return apply_primitive("elu", (a,))


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def tanh(a):
    return apply_primitive("tanh", (a,))


def softmax(a):
    return apply_primitive("softmax_lastdim", (a,))


def layer_norm(a):
    return apply_primitive("layer_norm_lastdim", (a,))


def dropout(a, mask):
    return apply_primitive("dropout_with_mask", (a, mask))


def embedding(table, indices):
    return apply_primitive("embedding_lookup", (table,), indices=indices)


# ---------------------------------------------------------------------------
# reverse pass

def _backward_from(tape: Tape, output: Tensor, seed: np.ndarray) -> dict[str, Tensor]:
    produced = {id(e.output) for e in tape.entries}
    if id(output) not in produced:
        raise GraphError("output is not on the tape (detached from the recorded graph)")
    grads: dict[int, np.ndarray] = {id(output): seed}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        for t in entry.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.get(id(entry.output))
        if g is None:
            continue
        for t, gt in zip(entry.inputs, entry.grad_fn(g)):
            if gt is None or not t.requires_grad:
                continue
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + gt
            else:
                grads[id(t)] = gt
    out: dict[str, Tensor] = {}
    for tid, leaf in leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros(leaf.shape)
        out[leaf.name] = Tensor(np.asarray(g).reshape(leaf.shape), _validate=False)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar loss w.r.t. every grad-requiring leaf on the tape.

    Leaves that do not influence the loss map to zero gradients. The reverse
    sweep uses a fixed accumulation order, so repeated calls are bit-identical.
    """
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad (detached)")
    return _backward_from(tape, loss, np.ones(loss.shape))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-6) -> float:
    """Max relative discrepancy between analytic and central-difference grads.

    `f` must be pure and deterministic. Non-scalar outputs are probed through
    a fixed pseudo-random linear functional (the same on both sides), which
    avoids degenerate reductions like sum-of-softmax being constant.
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    x0 = Tensor(x.data, requires_grad=True, name="fd_x")
    with Tape() as tape:
        y = f(x0)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteInput("finite_diff_check output")
    if y.size == 1:
        w = np.ones(y.shape)
    else:
        w = np.random.default_rng(0x5EED).normal(size=y.shape)
    analytic = _backward_from(tape, y, w)["fd_x"].data

    flat = x.data.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += eps
        lo[i] -= eps
        fhi = (f(Tensor(hi.reshape(x.shape), _validate=False)).data * w).sum()
        flo = (f(Tensor(lo.reshape(x.shape), _validate=False)).data * w).sum()
        if not (np.isfinite(fhi) and np.isfinite(flo)):
            raise NonFiniteInput("finite_diff_check intermediate")
        numeric[i] = (fhi - flo) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))
