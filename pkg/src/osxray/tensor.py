"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 supported for the
gradient-check suites). Each operation records a closure that propagates
gradients to its inputs; ``backward()`` on a scalar walks the graph in
reverse topological order. Tensor data is treated as immutable after
construction; only the ``grad`` slot is written during backpropagation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError

Scalar = Union[int, float]


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"shapes {sa} and {sb} are not broadcastable") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_children", "_backward_fn", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor construction: non-finite values rejected")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._children: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"
        self._backward_done = False

    @classmethod
    def _from_op(cls, data: np.ndarray, children: Sequence["Tensor"], op: str,
                 backward_fn: Optional[Callable[[np.ndarray], None]]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(c.requires_grad for c in children)
        out.grad = None
        out._children = tuple(children) if out.requires_grad else ()
        out._backward_fn = backward_fn if out.requires_grad else None
        out._op = op
        out._backward_done = False
        return out

    # ------------------------------------------------------------------ basics

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._children = ()
        out._backward_fn = None
        out._op = "detach"
        out._backward_done = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op})"

    # -------------------------------------------------------------- elementwise

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._from_op(a.data + b.data, (a, b), "add", bw)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._from_op(a.data - b.data, (a, b), "sub", bw)

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(a.data * b.data, (a, b), "mul", bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._from_op(a.data / b.data, (a, b), "div", bw)

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __neg__(self) -> "Tensor":
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._from_op(-a.data, (a,), "neg", bw)

    def __pow__(self, p: Scalar) -> "Tensor":
        a = self
        out_data = a.data ** p

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * p * a.data ** (p - 1))

        return Tensor._from_op(out_data, (a,), "pow", bw)

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * out_data)

        return Tensor._from_op(out_data, (a,), "exp", bw)

    def log(self) -> "Tensor":
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._from_op(np.log(a.data), (a,), "log", bw)

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(a.data)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * 0.5 / out_data)

        return Tensor._from_op(out_data, (a,), "sqrt", bw)

    def leaky_relu(self, alpha: float = 0.1) -> "Tensor":
        a = self
        slope = np.where(a.data > 0, a.data.dtype.type(1), a.data.dtype.type(alpha))

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * slope)

        return Tensor._from_op(a.data * slope, (a,), "leaky_relu", bw)

    # ------------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if not a.requires_grad:
                return
            gg = g
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else axis
                axes = tuple(ax % a.data.ndim for ax in axes)
                gg = np.expand_dims(gg, tuple(sorted(axes)))
            a._accumulate(np.broadcast_to(gg, a.shape))

        return Tensor._from_op(out_data, (a,), "sum", bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = 1
            for ax in axes:
                n *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def frobenius_sq(self) -> "Tensor":
        """Sum of squared entries; gradient is 2x."""
        a = self
        out_data = np.asarray((a.data.astype(a.data.dtype) ** 2).sum(), dtype=a.data.dtype)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * 2 * a.data)

        return Tensor._from_op(out_data, (a,), "frobenius_sq", bw)

    # ----------------------------------------------------------- shape juggling

    def reshape(self, shape) -> "Tensor":
        a = self
        old_shape = a.shape

        def bw(g):
            if a.requires_grad:
                a._accumulate(g.reshape(old_shape))

        return Tensor._from_op(a.data.reshape(shape), (a,), "reshape", bw)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        a = self
        if axes is None:
            axes = tuple(reversed(range(a.data.ndim)))
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))

        def bw(g):
            if a.requires_grad:
                a._accumulate(g.transpose(inverse))

        return Tensor._from_op(a.data.transpose(axes), (a,), "transpose", bw)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def bw(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.add.at(full, idx, g)
                a._accumulate(full)

        return Tensor._from_op(a.data[idx], (a,), "getitem", bw)

    # ---------------------------------------------------------------- matmul

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
        if a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul batch dimensions differ: {a.shape} vs {b.shape}")

        def bw(g):
            if a.requires_grad:
                a._accumulate(np.matmul(g, b.data.swapaxes(-1, -2)))
            if b.requires_grad:
                b._accumulate(np.matmul(a.data.swapaxes(-1, -2), g))

        return Tensor._from_op(np.matmul(a.data, b.data), (a, b), "matmul", bw)

    __matmul__ = matmul

    # --------------------------------------------------------------- backward

    def backward(self) -> None:
        """Populate grads of every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("backward: loss value is non-finite")
        if self._backward_done:
            raise ContractError("backward already ran on this tensor; rebuild the graph instead of reusing it")
        self._backward_done = True
        if not self.requires_grad:
            return

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
            for child in node._children:
                if child.requires_grad and id(child) not in visited:
                    stack.append((child, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               tol: float = 1e-6) -> dict:
    """Compare the autodiff gradient of scalar-valued f against central
    finite differences.

    The numeric gradient is always evaluated in float64 so it serves as an
    independent oracle even when x is float32. Relative error per
    coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    xt = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    y = f(xt)
    if y.size != 1:
        raise ContractError(f"grad_check: f must be scalar-valued, got shape {y.shape}")
    y.backward()
    analytic = xt.grad.astype(np.float64) if xt.grad is not None else np.zeros(x.shape, dtype=np.float64)

    base = x.data.astype(np.float64)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = float(f(Tensor(base.copy(), dtype=np.float64)).data)
        flat[i] = keep - eps
        fm = float(f(Tensor(base.copy(), dtype=np.float64)).data)
        flat[i] = keep
        num_flat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return {"max_rel_err": max_rel, "pass": max_rel < tol,
            "analytic": analytic, "numeric": numeric}
