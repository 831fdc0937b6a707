"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray (float32 or float64) and records the ops applied
to it. Calling backward() on a scalar loss walks the recorded graph in
reverse topological order and accumulates gradients into every tensor with
requires_grad set. Every op validates that its output is finite: a NaN or
Inf raises immediately instead of propagating silently.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

ALLOWED_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _quiet():
    # ops that can overflow or divide by zero raise via _check_finite; the
    # numpy warning for the intermediate value is redundant noise
    return np.errstate(over="ignore", divide="ignore", invalid="ignore")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[], None] | None = None

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise TypeError(f"dtype mismatch: {self.dtype} vs {other.dtype}")
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def _make(self, data: np.ndarray, parents: tuple, backward: Callable[[], None], op: str) -> "Tensor":
        requires = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=requires, _parents=parents if requires else (), _op=op)
        if requires:
            out._backward = backward_binder(out, backward)
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = grad.astype(self.dtype, copy=True)
        else:
            self.grad += grad.astype(self.dtype, copy=False)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        out_data = self.data + other.data

        def backward(out):
            self._accumulate(_unbroadcast(out.grad, self.shape))
            other._accumulate(_unbroadcast(out.grad, other.shape))

        return self._make(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        out_data = self.data * other.data

        def backward(out):
            self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
            other._accumulate(_unbroadcast(out.grad * self.data, other.shape))

        return self._make(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        with _quiet():
            out_data = self.data / other.data

        def backward(out):
            self._accumulate(_unbroadcast(out.grad / other.data, self.shape))
            other._accumulate(_unbroadcast(-out.grad * self.data / (other.data ** 2), other.shape))

        return self._make(out_data, (self, other), backward, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("pow expects a python scalar exponent")
        e = float(exponent)
        with _quiet():
            out_data = self.data ** e

        def backward(out):
            self._accumulate(out.grad * e * self.data ** (e - 1.0))

        return self._make(out_data, (self,), backward, "pow")

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError(f"matmul requires ndim >= 2, got {self.ndim} and {other.ndim}")
        out_data = self.data @ other.data

        def backward(out):
            self._accumulate(_unbroadcast(out.grad @ other.data.swapaxes(-1, -2), self.shape))
            other._accumulate(_unbroadcast(self.data.swapaxes(-1, -2) @ out.grad, other.shape))

        return self._make(out_data, (self, other), backward, "matmul")

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def backward(out):
            self._accumulate(out.grad.reshape(self.shape))

        return self._make(out_data, (self,), backward, "reshape")

    def swapaxes(self, a: int, b: int) -> "Tensor":
        out_data = self.data.swapaxes(a, b)

        def backward(out):
            self._accumulate(out.grad.swapaxes(a, b))

        return self._make(out_data, (self,), backward, "swapaxes")

    def take_rows(self, indices) -> "Tensor":
        """Gather rows of a 2-d tensor; gradient scatter-adds back."""
        idx = np.asarray(indices, dtype=np.int64)
        if self.ndim != 2:
            raise ValueError(f"take_rows expects a 2-d tensor, got shape {self.shape}")
        out_data = self.data[idx]

        def backward(out):
            if self.requires_grad:
                g = np.zeros_like(self.data)
                np.add.at(g, idx, out.grad)
                self._accumulate(g)

        return self._make(out_data, (self,), backward, "take_rows")

    def astype(self, dtype) -> "Tensor":
        dt = np.dtype(dtype)
        out_data = self.data.astype(dt)
        src = self.dtype

        def backward(out):
            self._accumulate(out.grad.astype(src))

        return self._make(out_data, (self,), backward, "astype")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(out):
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return self._make(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities --------------------------------------------

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0)

        def backward(out):
            self._accumulate(out.grad * (self.data > 0))

        return self._make(out_data, (self,), backward, "relu")

    def gelu(self) -> "Tensor":
        # tanh approximation; derivative in closed form
        c = 0.7978845608028654  # sqrt(2/pi)
        a = 0.044715
        x = self.data
        t = np.tanh(c * (x + a * x ** 3))
        out_data = 0.5 * x * (1.0 + t)

        def backward(out):
            d_inner = c * (1.0 + 3.0 * a * x ** 2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
            self._accumulate(out.grad * local)

        return self._make(out_data, (self,), backward, "gelu")

    def exp(self) -> "Tensor":
        with _quiet():
            out_data = np.exp(self.data)

        def backward(out):
            self._accumulate(out.grad * out_data)

        return self._make(out_data, (self,), backward, "exp")

    def log(self) -> "Tensor":
        with _quiet():
            out_data = np.log(self.data)

        def backward(out):
            self._accumulate(out.grad / self.data)

        return self._make(out_data, (self,), backward, "log")

    def sqrt(self) -> "Tensor":
        with _quiet():
            out_data = np.sqrt(self.data)

        def backward(out):
            self._accumulate(out.grad * 0.5 / out_data)

        return self._make(out_data, (self,), backward, "sqrt")

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def backward(out):
            self._accumulate(out.grad * (1.0 - out_data ** 2))

        return self._make(out_data, (self,), backward, "tanh")

    def clip(self, lo: float, hi: float) -> "Tensor":
        out_data = np.clip(self.data, lo, hi)

        def backward(out):
            inside = (self.data >= lo) & (self.data <= hi)
            self._accumulate(out.grad * inside)

        return self._make(out_data, (self,), backward, "clip")

    # -- softmax family ---------------------------------------------------------

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(out):
            dot = (out.grad * out_data).sum(axis=axis, keepdims=True)
            self._accumulate(out_data * (out.grad - dot))

        return self._make(out_data, (self,), backward, "softmax")

    def logsumexp(self, axis: int = -1) -> "Tensor":
        m = self.data.max(axis=axis, keepdims=True)
        e = np.exp(self.data - m)
        s = e.sum(axis=axis, keepdims=True)
        out_data = (np.log(s) + m).squeeze(axis)
        soft = e / s

        def backward(out):
            self._accumulate(np.expand_dims(out.grad, axis) * soft)

        return self._make(out_data, (self,), backward, "logsumexp")

    # -- backward pass -----------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()


def backward_binder(out: Tensor, fn: Callable) -> Callable[[], None]:
    def run():
        fn(out)

    return run


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along an axis; gradient splits back."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"concat dtype mismatch: {sorted(str(d) for d in dtypes)}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else out_data.ndim + axis
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * out_data.ndim
            sl[ax] = slice(lo, hi)
            t._accumulate(out.grad[tuple(sl)])

    requires = _grad_enabled and any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=requires, _parents=tuple(tensors) if requires else (), _op="concat")
    if requires:
        out._backward = backward_binder(out, backward)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Stack same-shape tensors along a new axis (built from reshape+concat)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack of an empty sequence")
    shape = tensors[0].shape
    expanded = []
    for t in tensors:
        if t.shape != shape:
            raise ValueError(f"stack shape mismatch: {t.shape} vs {shape}")
        new_shape = shape[:axis] + (1,) + shape[axis:]
        expanded.append(t.reshape(new_shape))
    return concat(expanded, axis=axis)
