"""Dense tensors with a recording tape for reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape``)
and touching at least one tensor with ``requires_grad`` are recorded.  Outside
of a tape every operation runs in plain inference mode.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


_TAPES: list["Tape | None"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the reflected Tensor op

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape was already consumed by backward(); record a new one")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


@contextmanager
def no_grad():
    """Suspend recording (e.g. for Bellman targets)."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, opname: str):
    s = np.add.reduce(arr, axis=None) if arr.size else 0.0
    if not math.isfinite(float(s)) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{opname} produced non-finite values")


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable, opname: str) -> Tensor:
    _check_finite(out, opname)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(tuple(inputs), result, backward))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div by a tensor containing zeros")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0, a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def expm1(a: Tensor) -> Tensor:
    """``exp(a) - 1`` without cancellation near zero."""
    return _make(np.expm1(a.data), (a,), lambda g: (g * np.exp(a.data),), "expm1")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping was active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)), "minimum")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``target``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (logits,), lambda g: (g * (_sigmoid(x) - t),), "bce_with_logits")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------- structural


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``[n]`` or ``[B, n]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, inputs, backward, "linear")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """``[C,B,H,W]`` -> columns ``[C*k*k, B*Ho*Wo]``."""
    c, b, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if padding:
        xp = np.zeros((c, b, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
        x = xp
    cols = np.empty((c, k, k, b, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * k * k, b * ho * wo), ho, wo


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; ``shape`` is the ``[C,B,H,W]`` image shape."""
    c, b, h, w = shape
    cols = cols.reshape(c, k, k, b, ho, wo)
    out = np.zeros((c, b, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def _to_cnhw(x: Tensor, layout: str, opname: str) -> tuple[np.ndarray, str]:
    """Return channel-major data and a tag describing how to restore the caller's layout."""
    if layout == "CNHW":
        if x.ndim != 4:
            raise ValueError(f"{opname}: CNHW layout needs a 4-d input, got shape {x.shape}")
        return x.data, "CNHW"
    if layout != "NCHW":
        raise ValueError(f"{opname}: unknown layout {layout!r}")
    if x.ndim == 3:
        return x.data[:, None], "CHW"
    if x.ndim == 4:
        return x.data.transpose(1, 0, 2, 3), "NCHW"
    raise ValueError(f"{opname}: expected [C,H,W] or [B,C,H,W] input, got shape {x.shape}")


def _from_cnhw(a: np.ndarray, tag: str) -> np.ndarray:
    if tag == "CNHW":
        return a
    if tag == "CHW":
        return a[:, 0]
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, layout: str = "NCHW") -> Tensor:
    """Cross-correlation. ``weight`` is ``[C_out, C_in, k, k]``.

    ``x`` is ``[C,H,W]`` or ``[B,C,H,W]``; ``layout="CNHW"`` takes and returns
    channel-major ``[C,B,H,W]`` batches, which avoids transposes in deep stacks.
    """
    xc, tag = _to_cnhw(x, layout, "conv2d")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise ValueError("conv2d: only square kernels are supported")
    if xc.shape[0] != cin:
        raise ValueError(f"conv2d: input channels {xc.shape[0]} != weight in-channels {cin}")
    _, b, h, w = xc.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {k} larger than padded input height/width ({h}x{w})")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    cols, ho, wo = _im2col(xc, k, stride, padding)
    w2 = weight.data.reshape(cout, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _from_cnhw(out.reshape(cout, b, ho, wo), tag)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = _to_cnhw(Tensor(g), layout, "conv2d")[0].reshape(cout, -1)  # copies for NCHW
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gx = _from_cnhw(_col2im(w2.T @ g2, xc.shape, k, stride, padding, ho, wo), tag)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _make(out, inputs, backward, "conv2d")


def deconv2d(y: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
             padding: int = 0, output_padding: int = 0, layout: str = "NCHW") -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` with the same weight.

    ``weight`` is ``[C_in, C_out, k, k]`` where ``C_in`` is this layer's input
    channels (the out-channels of the mirrored convolution).
    """
    yc, tag = _to_cnhw(y, layout, "deconv2d")
    cin, cout, k, k2 = weight.shape
    if k != k2:
        raise ValueError("deconv2d: only square kernels are supported")
    if yc.shape[0] != cin:
        raise ValueError(f"deconv2d: input channels {yc.shape[0]} != weight in-channels {cin}")
    if not 0 <= output_padding < max(stride, 1):
        raise ValueError("deconv2d: output_padding must be smaller than stride")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"deconv2d: bias shape {bias.shape} != ({cout},)")
    _, b, ho, wo = yc.shape
    h = (ho - 1) * stride - 2 * padding + k + output_padding
    w = (wo - 1) * stride - 2 * padding + k + output_padding
    if conv_output_size(h, k, stride, padding) != ho or conv_output_size(w, k, stride, padding) != wo:
        raise ValueError("deconv2d: inconsistent stride/padding for this input size")
    w2 = weight.data.reshape(cin, -1)
    y2 = yc.reshape(cin, -1)
    out = _col2im(w2.T @ y2, (cout, b, h, w), k, stride, padding, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = _from_cnhw(out, tag)
    inputs = (y, weight) if bias is None else (y, weight, bias)

    def backward(g):
        gc = _to_cnhw(Tensor(g), layout, "deconv2d")[0]
        gcols, _, _ = _im2col(gc, k, stride, padding)
        gw = (y2 @ gcols.T).reshape(weight.shape)
        gy = None
        if y.requires_grad:
            gy = _from_cnhw((w2 @ gcols).reshape(cin, b, ho, wo), tag)
        if bias is None:
            return gy, gw
        return gy, gw, gc.sum(axis=(1, 2, 3))

    return _make(out, inputs, backward, "deconv2d")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),), "transpose")


# ---------------------------------------------------------------- backward


class GradMap(dict):
    """Maps leaf tensors (by identity) to gradient arrays."""

    def __missing__(self, key):
        raise KeyError(f"no gradient recorded for {key!r}")


def backward(loss: Tensor, tape: Tape) -> GradMap:
    """Reverse pass over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns gradients for every tensor that requires grad and was used as an
    input but not produced on the tape (parameters and inputs).  The tape is
    cleared and cannot be replayed.
    """
    if tape.consumed:
        raise TapeError("backward() called twice on the same tape")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or not tape.nodes:
        raise TapeError("loss was not produced on this tape")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    out = GradMap()
    for key, t in leaves.items():
        out[t] = grads[key]
    tape.clear()
    tape.consumed = True
    return out


def parameters_grad(grads: GradMap, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients for ``params`` in order, zeros for parameters outside the graph."""
    return [grads[p] if p in grads else np.zeros_like(p.data) for p in params]
