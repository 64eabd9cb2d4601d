"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` is an immutable matrix.  Tensors created through
:meth:`Tape.param` or :meth:`Tape.constant` are recorded on that tape, and
every operation whose inputs live on a tape records its output there too.
Operations on untaped tensors are plain evaluation.

Non-finite results are treated as errors: every operation runs under
``np.errstate(all="raise", under="ignore")`` and leaf values are validated on entry, so any
overflow, invalid operation or division by zero surfaces as
:class:`NonFiniteError`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "affine",
    "square",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "total",
    "mean",
    "row_sums",
    "col_means",
    "take_rows",
    "concat_rows",
    "concat_cols",
    "transpose",
    "quantile",
    "finite_diff_check",
]


class NonFiniteError(FloatingPointError):
    """A tensor operation produced or received NaN/Inf."""


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"tensors are 2-D, got {arr.ndim}-D input")
    if not np.isfinite(arr).all():
        raise NonFiniteError("non-finite entries in tensor input")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable row-major matrix, optionally recorded on a :class:`Tape`."""

    __slots__ = ("data", "_tape", "_id")

    def __init__(self, data, _tape: "Tape | None" = None, _id: int = -1):
        self.data = _as_matrix(data)
        self._tape = _tape
        self._id = _id

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: "Tape | None" = None, node: int = -1) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t._tape = tape
        t._id = node
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def tape(self) -> "Tape | None":
        return self._tape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        taped = "" if self._tape is None else f", node={self._id}"
        return f"Tensor(shape={self.shape}{taped})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple[int, ...], backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Records operations in execution order for a single backward pass.

    Calling :meth:`backward` a second time on the same tape raises
    ``RuntimeError``; build a fresh tape per step.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._shapes: list[tuple[int, int]] = []
        self._grads: list[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, op: str, value: np.ndarray, parents: tuple[int, ...], backward) -> Tensor:
        node = len(self._nodes)
        self._nodes.append(_Node(op, parents, backward))
        self._shapes.append(value.shape)
        return Tensor._wrap(value, self, node)

    def param(self, value) -> Tensor:
        """Leaf whose gradient is wanted."""
        if self._grads is not None:
            raise RuntimeError("tape has already been consumed by backward()")
        arr = _as_matrix(value) if not isinstance(value, Tensor) else value.data
        return self._record("param", arr, (), None)

    def constant(self, value) -> Tensor:
        arr = _as_matrix(value) if not isinstance(value, Tensor) else value.data
        return self._record("const", arr, (), None)

    @property
    def consumed(self) -> bool:
        return self._grads is not None

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise ValueError("loss tensor was not recorded on this tape")
        if loss.shape != (1, 1):
            raise ValueError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        if self._grads is not None:
            raise RuntimeError("backward() already ran on this tape")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss._id] = np.ones((1, 1))
        with np.errstate(all="raise", under="ignore"):
            try:
                for i in range(loss._id, -1, -1):
                    g = grads[i]
                    node = self._nodes[i]
                    if g is None or node.backward is None:
                        continue
                    for pid, pg in zip(node.parents, node.backward(g)):
                        if pg is None:
                            continue
                        if grads[pid] is None:
                            grads[pid] = pg
                        else:
                            grads[pid] = grads[pid] + pg
            except FloatingPointError as exc:
                raise NonFiniteError(f"non-finite gradient: {exc}") from None
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the loss w.r.t. ``t``; zeros when ``t`` is unreachable."""
        if self._grads is None:
            raise RuntimeError("call backward() first")
        if t._tape is not self:
            raise ValueError("tensor is not on this tape")
        g = self._grads[t._id]
        return np.zeros(self._shapes[t._id]) if g is None else g


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t._tape is not None:
            if tape is not None and t._tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t._tape
    if tape is None:
        return Tensor._wrap(value)
    if tape._grads is not None:
        raise RuntimeError("tape has already been consumed by backward()")
    parents = []
    for t in inputs:
        if t._tape is None:
            t = tape.constant(t)
            # the freshly recorded constant is a plain leaf
        parents.append(t._id)
    return tape._record(op, value, tuple(parents), backward)


def _checked(fn):
    def wrapper(*args, **kwargs):
        with np.errstate(all="raise", under="ignore"):
            try:
                return fn(*args, **kwargs)
            except FloatingPointError as exc:
                raise NonFiniteError(f"{fn.__name__}: {exc}") from None

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and shape[1] == 1:
        return g.sum(keepdims=True).reshape(1, 1)
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1:
        return g.sum(axis=1, keepdims=True)
    raise ValueError(f"cannot reduce gradient {g.shape} to {shape}")


def _broadcast_ok(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or y == 1 for x, y in zip(a, b))


@_checked
def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    av, bv = a.data, b.data

    def back(g):
        return g @ bv.T, av.T @ g

    return _emit("matmul", av @ bv, (a, b), back)


@_checked
def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector or scalar broadcast over ``a``."""
    a, b = _lift(a), _lift(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    bs = b.shape

    def back(g):
        return g, _unbroadcast(g, bs)

    return _emit("add", a.data + b.data, (a, b), back)


@_checked
def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")
    bs = b.shape

    def back(g):
        return g, -_unbroadcast(g, bs)

    return _emit("sub", a.data - b.data, (a, b), back)


@_checked
def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.data, b.data
    bs = b.shape

    def back(g):
        return g * bv, _unbroadcast(g * av, bs)

    return _emit("mul", av * bv, (a, b), back)


@_checked
def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


@_checked
def relu(a) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    a = _lift(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


@_checked
def affine(x, w, b) -> Tensor:
    """``x @ w + b`` as one node (b is a 1 x n row)."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
        raise ValueError(f"affine shapes incompatible: {x.shape}, {w.shape}, {b.shape}")
    xv, wv = x.data, w.data

    def back(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)

    return _emit("affine", xv @ wv + b.data, (x, w, b), back)


@_checked
def square(a) -> Tensor:
    a = _lift(a)
    av = a.data
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@_checked
def softmax(a) -> Tensor:
    a = _lift(a)
    p = _softmax_rows(a.data)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit("softmax", p, (a,), back)


@_checked
def log_softmax(a) -> Tensor:
    a = _lift(a)
    z = a.data
    shifted = z - z.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax", out, (a,), back)


def _check_labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} rows")
    y = y.astype(np.intp)
    if n and (y.min() < 0 or y.max() > 1):
        raise ValueError("labels must be 0 or 1")
    return y


@_checked
def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label] for two-class logits."""
    logits = _lift(logits)
    n, c = logits.shape
    if c != 2:
        raise ValueError(f"expected 2 logit columns, got {c}")
    y = _check_labels(labels, n)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = logsum - shifted[rows, y]
    loss = max(float(nll.mean()), 0.0)

    def back(g):
        p = _softmax_rows(z)
        p[rows, y] -= 1.0
        return (p * (g[0, 0] / n),)

    return _emit("softmax_xent", np.array([[loss]]), (logits,), back)


@_checked
def total(a) -> Tensor:
    a = _lift(a)
    shape = a.shape
    return _emit("sum", np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


@_checked
def mean(a) -> Tensor:
    a = _lift(a)
    shape = a.shape
    n = a.data.size
    return _emit("mean", np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))


@_checked
def row_sums(a) -> Tensor:
    a = _lift(a)
    shape = a.shape
    return _emit("row_sums", a.data.sum(axis=1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


@_checked
def col_means(a) -> Tensor:
    a = _lift(a)
    shape = a.shape
    n = shape[0]
    return _emit("col_means", a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def take_rows(a, rows) -> Tensor:
    """Rows selected by a slice or an index array."""
    a = _lift(a)
    shape = a.shape
    idx = rows if isinstance(rows, slice) else np.asarray(rows, dtype=np.intp)

    def back(g):
        out = np.zeros(shape)
        if isinstance(idx, slice):
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", a.data[idx].copy(), (a,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    if len({p.shape[1] for p in parts}) != 1:
        raise ValueError("concat_rows needs a common column count")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_rows", np.concatenate([p.data for p in parts], axis=0), parts, back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    if len({p.shape[0] for p in parts}) != 1:
        raise ValueError("concat_cols needs a common row count")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", np.concatenate([p.data for p in parts], axis=1), parts, back)


def transpose(a) -> Tensor:
    a = _lift(a)
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def quantile(a, q: float) -> Tensor:
    """Empirical ``q``-quantile of a 1 x n row, linear interpolation between order statistics."""
    a = _lift(a)
    if a.shape[0] != 1 or a.shape[1] == 0:
        raise ValueError(f"quantile expects a non-empty 1 x n row, got {a.shape}")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level must lie in [0, 1], got {q}")
    v = a.data[0]
    n = v.shape[0]
    order = np.argsort(v, kind="stable")
    pos = q * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    value = (1.0 - frac) * v[order[lo]] + frac * v[order[hi]]
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[0, order[lo]] += (1.0 - frac) * g[0, 0]
        out[0, order[hi]] += frac * g[0, 0]
        return (out,)

    return _emit("quantile", np.array([[value]]), (a,), back)


def finite_diff_check(f: Callable[[Tape, list[Tensor]], Tensor], params: Sequence[np.ndarray],
                      h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, leaves)`` builds a scalar loss from taped parameter leaves.  The
    error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    Callers keep sampled points away from relu kinks.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = [np.array(p, dtype=np.float64, ndmin=2) for p in params]
    tape = Tape()
    leaves = [tape.param(p) for p in params]
    loss = f(tape, leaves)
    tape.backward(loss)
    analytic = [tape.grad(leaf) for leaf in leaves]

    def evaluate(values):
        val = f(None, [Tensor(v) for v in values]).item()
        if not np.isfinite(val):
            raise NonFiniteError("objective is not finite")
        return val

    worst = 0.0
    for k, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += h
            minus[k][idx] -= h
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
            err = abs(analytic[k][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
