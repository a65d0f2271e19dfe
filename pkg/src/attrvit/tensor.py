"""Dense float64 tensors with a reverse-mode differentiation tape.

Values are numpy arrays wrapped in :class:`Tensor`. Operations executed
while a :class:`Tape` is active are recorded; :meth:`Tape.backward` then
walks the record once in reverse and accumulates gradients. Tensors
created or combined outside any tape are plain values and never receive
gradients, which is how the momentum branch of the trainer is kept out
of the optimization graph.

All arithmetic follows numpy broadcasting; gradients of broadcast
operands are summed back to the operand shape. The backward sweep visits
entries in a fixed reverse order, so repeated sweeps over one tape
produce bit-identical gradients.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "TapeError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "power",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "clamp_min",
    "relu",
    "gelu",
    "sigmoid",
    "softplus",
    "tanh",
    "reshape",
    "transpose",
    "swap_last_axes",
    "concat",
    "take_slice",
    "tensor_sum",
    "tensor_mean",
    "softmax",
    "l2_normalize",
    "layer_norm",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced or was handed non-finite values."""


class TapeError(RuntimeError):
    """Backward was requested on an invalid tape and loss combination."""


_EPS_DEFAULT = 1e-8


class Tensor:
    """A dense float64 array, optionally attached to a differentiation tape.

    ``data`` is the value, ``grad`` is filled by :meth:`Tape.backward`
    for tensors the sweep reached (watched tensors always get a buffer,
    zero when disconnected), and ``tape_id`` is the position the active
    tape assigned when the tensor first took part in a recorded op.
    """

    __slots__ = ("data", "grad", "tape_id")

    def __init__(self, data) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A copy with no tape attachment."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tape_id={self.tape_id})"

    # Arithmetic delegates to the module-level ops so everything records
    # through one code path.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take_slice(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)


class _Entry:
    """One recorded op: inputs, output, and the rule mapping the output
    gradient to one gradient per input (None for inputs with no flow)."""

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward) -> None:
        self.inputs = inputs
        self.output = output
        self.backward = backward


_active_tape: "Tape | None" = None


class Tape:
    """Single-writer record of operations for one backward sweep.

    Use as a context manager. Nesting tapes is rejected: one training
    step builds and consumes exactly one tape.
    """

    def __init__(self) -> None:
        self._entries: list[_Entry] = []
        self._ids: dict[int, int] = {}
        self._tensors: list[Tensor] = []
        self._watched: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def watch(self, *tensors: Tensor) -> None:
        """Register tensors that must receive a grad buffer even if no
        recorded op touches them (disconnected parameters get zeros)."""
        for t in tensors:
            self._ensure_id(t)
            self._watched.append(t)

    def _ensure_id(self, t: Tensor) -> int:
        key = id(t)
        tid = self._ids.get(key)
        if tid is None:
            tid = len(self._tensors)
            self._ids[key] = tid
            self._tensors.append(t)
            t.tape_id = tid
        return tid

    def _record(self, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        for t in inputs:
            self._ensure_id(t)
        self._ensure_id(output)
        self._entries.append(_Entry(inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from ``loss`` (a scalar recorded on this tape).

        Fills ``grad`` on every tensor the sweep reaches and on every
        watched tensor; a watched tensor with no path to the loss gets a
        zero buffer.
        """
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        tid = self._ids.get(id(loss))
        if tid is None:
            raise TapeError("loss tensor was not recorded on this tape")
        grads: dict[int, np.ndarray] = {tid: np.ones_like(loss.data)}
        for entry in reversed(self._entries):
            out_grad = grads.get(self._ids[id(entry.output)])
            if out_grad is None:
                continue
            in_grads = entry.backward(out_grad)
            for t, g in zip(entry.inputs, in_grads):
                if g is None:
                    continue
                k = self._ids[id(t)]
                held = grads.get(k)
                grads[k] = g if held is None else held + g
        for t in self._tensors:
            g = grads.get(self._ids[id(t)])
            if g is not None:
                t.grad = np.ascontiguousarray(g)
        for t in self._watched:
            if grads.get(self._ids[id(t)]) is None:
                t.grad = np.zeros_like(t.data)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(inputs: tuple[Tensor, ...], out: Tensor, backward) -> Tensor:
    if _active_tape is not None:
        _active_tape._record(inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record((a, b), out, backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record((a, b), out, backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record((a, b), out, backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record((a, b), out, backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def backward(g):
        return (-g,)

    return _record((a,), out, backward)


def matmul(a, b) -> Tensor:
    """Matrix product contracting the last axis of ``a`` with the
    second-to-last of ``b``; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record((a, b), out, backward)


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant exponent."""
    a = _as_tensor(a)
    p = float(exponent)
    out = Tensor(a.data**p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record((a,), out, backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def backward(g):
        return (g * out.data,)

    return _record((a,), out, backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def backward(g):
        return (g / a.data,)

    return _record((a,), out, backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def backward(g):
        return (g * 0.5 / out.data,)

    return _record((a,), out, backward)


def absolute(a) -> Tensor:
    """Elementwise absolute value; subgradient 0 at the kink."""
    a = _as_tensor(a)
    out = Tensor(np.abs(a.data))

    def backward(g):
        return (g * np.sign(a.data),)

    return _record((a,), out, backward)


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only above the floor."""
    a = _as_tensor(a)
    c = float(floor)
    out = Tensor(np.maximum(a.data, c))

    def backward(g):
        return (g * (a.data > c),)

    return _record((a,), out, backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward(g):
        return (g * (a.data > 0.0),)

    return _record((a,), out, backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(g):
        d_inner = _GELU_C * (1.0 + (3.0 * 0.044715) * x2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * local,)

    return _record((a,), out, backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = Tensor(np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))))

    def backward(g):
        return (g * out.data * (1.0 - out.data),)

    return _record((a,), out, backward)


def softplus(a) -> Tensor:
    """log(1 + exp(a)) computed without overflow for large ``a``."""
    a = _as_tensor(a)
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))

    def backward(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _record((a,), out, backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def backward(g):
        return (g * (1.0 - out.data**2),)

    return _record((a,), out, backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _record((a,), out, backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record((a,), out, backward)


def swap_last_axes(a) -> Tensor:
    """Transpose the trailing two axes, leaving leading axes in place."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"need rank >= 2 to swap trailing axes, got {a.shape}")
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(tuple(parts), out, backward)


def take_slice(a, key) -> Tensor:
    """Basic indexing (ints and slices); gradient scatters back."""
    a = _as_tensor(a)
    out = Tensor(np.array(a.data[key], dtype=np.float64))

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return (full,)

    return _record((a,), out, backward)


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record((a,), out, backward)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    if axes is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axes]))

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _record((a,), out, backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Row-stochastic softmax along ``axis`` (shift-invariant, stable)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def backward(g):
        y = out.data
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record((a,), out, backward)


def l2_normalize(a, axis: int = -1, eps: float = _EPS_DEFAULT) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    The divisor is max(norm, eps), so near-zero slices shrink toward zero
    instead of blowing up and the result norm never exceeds 1. The clamp
    sits under the square root so an exactly-zero slice keeps a finite
    backward pass (sqrt at 0 would turn the blocked gradient into 0*inf).
    """
    norm = sqrt(clamp_min(tensor_sum(mul(a, a), axis=axis, keepdims=True), eps * eps))
    return div(a, norm)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply
    an elementwise affine map."""
    a = _as_tensor(a)
    gain = _as_tensor(gain)
    bias = _as_tensor(bias)
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis of {a.shape}"
        )
    mu = tensor_mean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = tensor_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(centered, sqrt(add(var, eps)))
    return add(mul(inv, gain), bias)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of scalar ``f`` against central
    finite differences at step ``h``.

    Returns the maximum relative error max|ad - fd| / max(|ad|, |fd|,
    1e-8) over the checked coordinates. ``max_coords`` caps how many
    coordinates of ``x`` are probed (a seeded uniform subsample); None
    probes all of them. ``f`` must be a pure function of ``x``.
    """
    with Tape() as tape:
        tape.watch(x)
        out = f(x)
        if out.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        tape.backward(out)
    ad = x.grad.reshape(-1).copy()

    n = x.data.size
    if max_coords is not None and max_coords < n:
        rng = np.random.default_rng(seed)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in coords:
        saved = flat[i]
        flat[i] = saved + h
        hi = f(x).item()
        flat[i] = saved - h
        lo = f(x).item()
        flat[i] = saved
        fd = (hi - lo) / (2.0 * h)
        err = abs(ad[i] - fd) / max(abs(ad[i]), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst
