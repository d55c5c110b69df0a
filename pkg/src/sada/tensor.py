"""
Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a numpy
``forward`` and a ``backward`` that maps the upstream gradient to one gradient
per input. :meth:`Function.apply` wraps the result in a :class:`Tensor` that
remembers its creator, which is all :meth:`Tensor.backward` needs to walk the
graph.

Layout is row-major NCHW throughout and broadcasting aligns trailing axes
(numpy rules).

Example:
    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> (x * x).sum().backward()
    >>> x.grad
    array([2., 4., 6.], dtype=float32)
"""

from __future__ import annotations

import contextlib
import contextvars
import logging
from collections import Counter
from typing import Any, Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import SadaContractError, SadaShapeError

logger = logging.getLogger(__name__)

DIV_EPS = 1e-12
LOG_EPS = 1e-12
EXP_MAX = 80.0

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("sada_grad_enabled", default=True)
_guard_counter: contextvars.ContextVar[Optional["GuardCounter"]] = contextvars.ContextVar(
    "sada_guard_counter", default=None
)


# ============================================
# Grad mode and guard events
# ============================================

def is_grad_enabled() -> bool:
    """Whether new operations record a graph in the current context."""
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (per thread / context)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class GuardCounter:
    """Counts numeric guard events (clamped denominators, logs, exponents).

    Guard events are not errors; they are surfaced in adaptation reports.
    """

    def __init__(self) -> None:
        self.counts: Counter[str] = Counter()

    def record(self, kind: str, n: int = 1) -> None:
        self.counts[kind] += n

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def as_dict(self) -> dict[str, int]:
        return dict(sorted(self.counts.items()))


@contextlib.contextmanager
def guard_scope(counter: Optional[GuardCounter] = None) -> Iterator[GuardCounter]:
    """Collect guard events raised inside the block into ``counter``."""
    counter = counter if counter is not None else GuardCounter()
    token = _guard_counter.set(counter)
    try:
        yield counter
    finally:
        _guard_counter.reset(token)


def record_guard(kind: str, n: int = 1) -> None:
    """Record ``n`` guard events of ``kind`` in the active scope, if any."""
    if n <= 0:
        return
    logger.debug(f"guard event {kind} x{n}")
    counter = _guard_counter.get()
    if counter is not None:
        counter.record(kind, n)


# ============================================
# Graph machinery
# ============================================

class Function:
    """Base class for differentiable operations.

    ``forward`` receives the ``.data`` arrays of the input tensors and returns
    the output array. ``backward`` receives dL/d(output) and returns a tuple
    with one entry per input (``None`` where no gradient flows).
    """

    def __init__(self, *inputs: "Tensor") -> None:
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast axes so ``grad`` matches ``shape``."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad.reshape(shape)


class Tensor:
    """A float32 array with optional gradient tracking.

    Attributes:
        data: The values, always a contiguous float32 ndarray
        requires_grad: Whether gradients accumulate into ``grad``
        grad: Accumulated gradient (same shape as ``data``) or None
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _ctx: Optional[Function] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if any(extent <= 0 for extent in arr.shape):
            raise SadaShapeError(f"Tensor extents must be positive, got {arr.shape}", shapes=[arr.shape])
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    # ---- introspection ----

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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ---- autodiff ----

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Backpropagate from this tensor into every leaf that requires grad.

        Each graph node is visited exactly once in reverse topological order;
        gradients from several consumers of one tensor are summed.
        """
        if grad is None:
            if self.size != 1:
                raise SadaContractError(
                    f"backward() without a gradient needs a scalar, got shape {self.shape}",
                    parameter="grad",
                )
            grad_arr = np.ones(self.shape, dtype=np.float32)
        else:
            grad_arr = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=np.float32)
            if grad_arr.shape != self.shape:
                raise SadaShapeError(
                    f"Gradient shape {grad_arr.shape} does not match tensor shape {self.shape}",
                    shapes=[grad_arr.shape, self.shape],
                )

        order = self._topological_order()
        grads: dict[int, np.ndarray] = {id(self): grad_arr}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = g.astype(np.float32) if node.grad is None else node.grad + g
                continue
            input_grads = node._ctx.backward(g)
            for inp, ig in zip(node._ctx.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for inp in node._ctx.inputs:
                    if inp.requires_grad and id(inp) not in visited:
                        stack.append((inp, False))
        return order

    # ---- operators ----

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div_guarded(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div_guarded(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __getitem__(self, index: Any) -> "Tensor":
        return Index.apply(self, index=index)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def sum(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap arrays and scalars; tensors pass through unchanged."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _broadcast_check(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise SadaShapeError(
            f"Shapes {a.shape} and {b.shape} are not broadcast-compatible",
            shapes=[a.shape, b.shape],
        ) from e


# ============================================
# Elementwise arithmetic
# ============================================

class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_check(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_check(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_check(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class DivGuarded(Function):
    """a / b with |b| < 1e-12 replaced by a signed 1e-12 (zero counts as +)."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_check(a, b)
        small = np.abs(b) < DIV_EPS
        n_small = int(small.sum())
        if n_small:
            record_guard("div", n_small)
            b = np.where(small, np.where(b < 0, -DIV_EPS, DIV_EPS), b).astype(np.float32)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return self.unbroadcast(ga, self.a.shape), self.unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (-grad,)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def div_guarded(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise division whose tiny denominators are clamped and counted."""
    return DivGuarded.apply(as_tensor(a), as_tensor(b))


# ============================================
# Unary ops
# ============================================

class ReLU(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, np.float32(0.0))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.mask,)


class Exp(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        over = x > EXP_MAX
        if over.any():
            record_guard("exp", int(over.sum()))
            x = np.minimum(x, np.float32(EXP_MAX))
        self.out = np.exp(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        small = x < LOG_EPS
        if small.any():
            record_guard("log", int(small.sum()))
            x = np.maximum(x, np.float32(LOG_EPS))
        self.x = x
        return np.log(x)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad / self.x,)


class SoftmaxChannel(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim < 2:
            raise SadaShapeError(f"softmax_channel needs a channel axis, got shape {x.shape}", shapes=[x.shape])
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        s = self.out
        return (s * (grad - (grad * s).sum(axis=1, keepdims=True)),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    """Natural log; inputs below 1e-12 are clamped and counted as guard events."""
    return Log.apply(x)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over axis 1 (the channel axis of NCHW)."""
    return SoftmaxChannel.apply(x)


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over axis 1, no graph."""
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def argmax_channel(x: Tensor) -> Tensor:
    """Index of the largest channel per position (ties resolve to the lowest index)."""
    return Tensor(np.argmax(x.data, axis=1).astype(np.float32))


# ============================================
# Reductions and shape ops
# ============================================

class Sum(Function):
    def forward(self, x: np.ndarray, axis: Any = None, keepdims: bool = False) -> np.ndarray:
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=np.float32)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).astype(np.float32),)


class Mean(Function):
    def forward(self, x: np.ndarray, axis: Any = None, keepdims: bool = False) -> np.ndarray:
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        out = x.mean(axis=axis, keepdims=keepdims)
        self.count = x.size // max(np.asarray(out).size, 1)
        return np.asarray(out, dtype=np.float32)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return ((np.broadcast_to(grad, self.shape) / np.float32(self.count)).astype(np.float32),)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: tuple[int, ...] = ()) -> np.ndarray:
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as e:
            raise SadaShapeError(f"Cannot reshape {x.shape} to {shape}", shapes=[x.shape]) from e

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(self.in_shape),)


class Index(Function):
    def forward(self, x: np.ndarray, index: Any = None) -> np.ndarray:
        self.in_shape, self.index = x.shape, index
        return np.array(x[index], dtype=np.float32)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(self.in_shape, dtype=np.float32)
        np.add.at(out, self.index, grad)
        return (out,)


def reduce_sum(x: Tensor, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def reduce_mean(x: Tensor, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


# ============================================
# Convolution
# ============================================

class Conv2d(Function):
    """Cross-correlation over NCHW input via an im2col matrix product.

    The forward product accumulates in float64 before rounding back to
    float32, so results sit within half an ulp of the exact value.
    """

    def forward(
        self,
        x: np.ndarray,
        w: np.ndarray,
        b: np.ndarray,
        stride: int = 1,
        pad: int = 0,
    ) -> np.ndarray:
        if x.ndim != 4 or w.ndim != 4:
            raise SadaShapeError(
                f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {w.shape}",
                shapes=[x.shape, w.shape],
            )
        if stride < 1:
            raise SadaContractError(f"stride must be >= 1, got {stride}", parameter="stride")
        if pad < 0:
            raise SadaContractError(f"pad must be >= 0, got {pad}", parameter="pad")
        n, c, h, wd = x.shape
        o, i, kh, kw = w.shape
        if c != i:
            raise SadaShapeError(
                f"Input has {c} channels but the kernel expects {i}",
                shapes=[x.shape, w.shape],
            )
        if b.shape != (o,):
            raise SadaShapeError(f"Bias shape {b.shape} does not match {o} output channels", shapes=[b.shape])
        hp, wp = h + 2 * pad, wd + 2 * pad
        if kh > hp or kw > wp:
            raise SadaShapeError(
                f"Kernel {kh}x{kw} is larger than the padded input {hp}x{wp}",
                shapes=[x.shape, w.shape],
            )
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1

        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        wmat = w.reshape(o, -1)
        out = cols.astype(np.float64) @ wmat.T.astype(np.float64) + b.astype(np.float64)

        self.cols, self.wmat = cols, wmat
        self.geometry = (x.shape, w.shape, stride, pad, ho, wo)
        return out.astype(np.float32).reshape(n, ho, wo, o).transpose(0, 3, 1, 2).copy()

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        (n, c, h, wd), (o, _, kh, kw), stride, pad, ho, wo = self.geometry
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ self.cols).reshape(o, c, kh, kw)
        db = g2.sum(axis=0)
        dcols = (g2 @ self.wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=np.float32)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                    dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        return dx, dw.astype(np.float32), db.astype(np.float32)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    Output extent per spatial axis is ``floor((H + 2*pad - k) / stride) + 1``.
    """
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[0], dtype=np.float32))
    return Conv2d.apply(x, weight, bias, stride=stride, pad=pad)


# ============================================
# Bilinear resampling
# ============================================

def _sample_grid(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source taps with edge clamping for one axis.

    Output position d samples source coordinate (d + 0.5) * in/out - 0.5,
    clamped to [0, in - 1]; returns (lower index, upper index, weight of upper).
    """
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, (src - lo).astype(np.float32)


def _interp_matrix(lo: np.ndarray, hi: np.ndarray, w: np.ndarray, in_size: int) -> np.ndarray:
    m = np.zeros((lo.size, in_size), dtype=np.float32)
    rows = np.arange(lo.size)
    np.add.at(m, (rows, lo), 1.0 - w)
    np.add.at(m, (rows, hi), w)
    return m


class BilinearResize(Function):
    """Resize the last two axes; values are lerped as lo + w * (hi - lo)."""

    def forward(self, x: np.ndarray, out_h: int = 1, out_w: int = 1) -> np.ndarray:
        if x.ndim < 2:
            raise SadaShapeError(f"bilinear_resize needs at least 2 axes, got {x.shape}", shapes=[x.shape])
        if out_h < 1 or out_w < 1:
            raise SadaShapeError(f"Output extent must be positive, got {out_h}x{out_w}", shapes=[x.shape])
        in_h, in_w = x.shape[-2:]
        ylo, yhi, wy = _sample_grid(in_h, out_h)
        xlo, xhi, wx = _sample_grid(in_w, out_w)
        self.in_shape = x.shape
        self.taps = (ylo, yhi, wy, xlo, xhi, wx)

        top = x[..., ylo, :]
        rows = top + wy[:, None] * (x[..., yhi, :] - top)
        left = rows[..., xlo]
        return (left + wx * (rows[..., xhi] - left)).astype(np.float32)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        ylo, yhi, wy, xlo, xhi, wx = self.taps
        in_h, in_w = self.in_shape[-2:]
        my = _interp_matrix(ylo, yhi, wy, in_h)
        mx = _interp_matrix(xlo, xhi, wx, in_w)
        return ((np.swapaxes(my, 0, 1) @ grad @ mx).astype(np.float32),)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers and edge clamping.

    Resizing to the same extent returns the input values exactly, and a
    constant field stays exactly constant under any resize.
    """
    return BilinearResize.apply(x, out_h=out_h, out_w=out_w)


# ============================================
# Losses
# ============================================

class CrossEntropy(Function):
    """Mean pixelwise cross-entropy of NCHW logits against N x H x W labels."""

    def forward(self, logits: np.ndarray, labels: Optional[np.ndarray] = None, ignore_index: int = 255) -> np.ndarray:
        if labels is None or labels.shape != (logits.shape[0],) + logits.shape[2:]:
            raise SadaShapeError(
                "labels must have shape N x H x W matching the logits",
                shapes=[logits.shape, None if labels is None else labels.shape],
            )
        labels = labels.astype(np.int64)
        valid = labels != ignore_index
        safe = np.where(valid, labels, 0)
        logp = log_softmax_array(logits)
        picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
        self.n_valid = int(valid.sum())
        self.valid, self.safe, self.logp = valid, safe, logp
        if self.n_valid == 0:
            return np.zeros((), dtype=np.float32)
        return np.asarray(-(picked[valid]).sum() / np.float32(self.n_valid), dtype=np.float32)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        if self.n_valid == 0:
            return (np.zeros_like(self.logp),)
        d = np.exp(self.logp)
        np.put_along_axis(d, self.safe[:, None], np.take_along_axis(d, self.safe[:, None], axis=1) - 1.0, axis=1)
        d *= self.valid[:, None]
        return ((d * (grad / np.float32(self.n_valid))).astype(np.float32),)


class EntropyLoss(Function):
    """Mean over pixels of the softmax entropy -sum_c p_c log p_c."""

    def forward(self, logits: np.ndarray) -> np.ndarray:
        logp = log_softmax_array(logits)
        p = np.exp(logp)
        self.pix_entropy = -(p * logp).sum(axis=1, keepdims=True)
        self.p, self.logp = p, logp
        self.count = logits.size // logits.shape[1]
        return np.asarray(self.pix_entropy.mean(), dtype=np.float32)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        d = -self.p * (self.logp + self.pix_entropy)
        return ((d * (grad / np.float32(self.count))).astype(np.float32),)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Softmax cross-entropy averaged over non-ignored pixels (0 when none remain)."""
    return CrossEntropy.apply(logits, labels=np.asarray(labels), ignore_index=ignore_index)


def entropy_loss(logits: Tensor) -> Tensor:
    """Mean per-pixel softmax entropy of NCHW logits."""
    return EntropyLoss.apply(logits)


# ============================================
# Gradient checking
# ============================================

def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Compare the analytic gradient of a scalar function with central differences.

    Args:
        f: Function of one tensor returning a scalar tensor
        x: Point of evaluation (values should be O(1))
        eps: Finite-difference step

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |numeric|)

    Raises:
        SadaContractError: If ``f`` does not return a single value
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise SadaContractError(f"gradcheck needs a scalar-valued function, got shape {out.shape}", parameter="f")
    out.backward()
    analytic = (probe.grad if probe.grad is not None else np.zeros_like(probe.data)).astype(np.float64)

    numeric = np.zeros_like(analytic)
    flat = probe.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + np.float32(eps)
            up, f_up = float(flat[i]), f(probe).item()
            flat[i] = orig - np.float32(eps)
            down, f_down = float(flat[i]), f(probe).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_up - f_down) / (up - down)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())
