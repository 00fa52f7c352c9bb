"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation returns a new Tensor that records its parents and a
backward rule; the recorded graph is the tape. ``backward(loss)`` walks
that tape in reverse topological order and accumulates gradients into
the leaf tensors (the ones created directly with ``requires_grad=True``).

All operations are deterministic: re-running a forward/backward pass on
identical inputs produces bitwise-identical values. Gradients accumulate
additively across repeated ``backward`` calls until ``zero_grad``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, TokenIndexError

_FLOAT_DTYPES = (np.float32, np.float64)

# When enabled, every primitive checks its output for NaN/Inf and fails
# fast instead of letting the poison propagate through the graph.
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


def _checked(arr: np.ndarray, op_name: str) -> np.ndarray:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op_name} produced a non-finite value")
    return arr


class Tensor:
    """Dense multi-dimensional array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ----------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return add(self, neg(self._coerce(other)))

    def __rsub__(self, other):
        return add(self._coerce(other), neg(self))

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_(other, -1.0))
        return mul(self, self._coerce(1.0 / other))

    def __pow__(self, exponent: float):
        return pow_(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op_name: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _checked(data, op_name)
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _require_same_dtype(a: Tensor, b: Tensor, op_name: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ContractError(
            f"{op_name}: dtype mismatch {a.data.dtype} vs {b.data.dtype}"
        )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- primitives -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def pow_(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(a.data ** exponent, (a,), backward, "pow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on the leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires >=2-d operands, got shapes {a.shape} x {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    _require_same_dtype(a, b, "matmul")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor, axis1: int = -2, axis2: int = -1) -> Tensor:
    def backward(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _make(np.swapaxes(a.data, axis1, axis2), (a,), backward, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old_shape = a.shape

    def backward(g):
        return (g.reshape(old_shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return (np.broadcast_to(gx, a.shape).astype(a.data.dtype, copy=True),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward, "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); gradient at the origin is exactly 0.5."""
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * s * (1.0 + x * (1.0 - s)),)

    return _make(x * s, (a,), backward, "silu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax received NaN input")
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward, "softmax")


def rms_norm(a: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps) scaled elementwise by weight."""
    if eps <= 0:
        raise ContractError(f"rms_norm eps must be > 0, got {eps}")
    if weight.shape != a.shape[-1:]:
        raise DimensionError(
            f"rms_norm weight shape {weight.shape} does not match feature dim {a.shape[-1:]}"
        )
    _require_same_dtype(a, weight, "rms_norm")
    x = a.data
    d = x.shape[-1]
    ms = np.mean(x * x, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + np.asarray(eps, dtype=x.dtype))
    out = x * r * weight.data

    def backward(g):
        gw_term = g * weight.data
        # d/dx of x_i * r(x): r on the diagonal, -r^3 x_i x_j / d off it.
        inner = (gw_term * x).sum(axis=-1, keepdims=True)
        gx = gw_term * r - x * (r ** 3) * inner / d
        gweight = (g * x * r).reshape(-1, d).sum(axis=0)
        return gx, gweight

    return _make(out, (a, weight), backward, "rms_norm")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding_lookup ids must be integers")
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise TokenIndexError(
            f"embedding id out of range [0, {n_rows}): min={ids.min()}, max={ids.max()}"
        )

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _make(table.data[ids], (table,), backward, "embedding_lookup")


def index_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows (with repetition allowed); gradients scatter-add back."""
    rows = np.asarray(rows)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, rows, g)
        return (ga,)

    return _make(a.data[rows], (a,), backward, "index_rows")


def scatter_rows(values: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Scatter-add value rows into a zero tensor with ``n_rows`` rows."""
    rows = np.asarray(rows)
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.data.dtype)
    np.add.at(out, rows, values.data)

    def backward(g):
        return (g[rows],)

    return _make(out, (values,), backward, "scatter_rows")


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[t, k] = a[t, idx[t, k]] for a 2-d tensor."""
    if a.ndim != 2:
        raise DimensionError(f"gather_last requires a 2-d tensor, got shape {a.shape}")
    idx = np.asarray(idx)

    def backward(g):
        ga = np.zeros_like(a.data)
        rows = np.arange(a.shape[0])[:, None]
        np.add.at(ga, (np.broadcast_to(rows, idx.shape), idx), g)
        return (ga,)

    return _make(np.take_along_axis(a.data, idx, axis=-1), (a,), backward, "gather_last")


def gather_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[i] = a[rows[i], cols[i]], returned as a column vector."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g[:, 0])
        return (ga,)

    return _make(a.data[rows, cols][:, None], (a,), backward, "gather_pairs")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax.

    ``ignore_index`` rows (used for padding) are excluded from the mean.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n, vocab] logits, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy targets shape {targets.shape} does not match logits rows {logits.shape[0]}"
        )
    vocab = logits.shape[1]
    if ignore_index is None:
        valid = np.ones(targets.shape, dtype=bool)
    else:
        valid = targets != ignore_index
    checked = targets[valid]
    if checked.size == 0:
        raise ContractError("cross_entropy: no valid target positions")
    if checked.min() < 0 or checked.max() >= vocab:
        raise TokenIndexError(
            f"target id out of range [0, {vocab}): min={checked.min()}, max={checked.max()}"
        )

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    log_z = np.log(z) + m
    rows = np.arange(x.shape[0])
    safe_targets = np.where(valid, targets, 0)
    nll = log_z[:, 0] - x[rows, safe_targets]
    n_valid = int(valid.sum())
    loss = nll[valid].sum() / n_valid

    def backward(g):
        probs = e / z
        probs[rows, safe_targets] -= 1.0
        probs[~valid] = 0.0
        return (probs * (g / n_valid),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), backward, "cross_entropy")


# -- reverse pass -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every requires_grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        else:
            node.grad = g.copy() if node.grad is None else node.grad + g
