"""Dense-tensor reverse-mode differentiation on top of numpy.

Every differentiable primitive appends its output to a thread-local tape.
``backward`` replays the tape in reverse creation order, so each node is
visited exactly once and gradients accumulate additively across fan-out.

Broadcasting is limited to scalars and row/column vectors against 2-D
matrices; that covers every layer in the package.
"""
from __future__ import annotations

import builtins
import contextlib
import os
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

GUARD = 1e-12


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericalError(FloatingPointError):
    """A non-finite value was produced while debug checks were enabled."""


# ---------------------------------------------------------------------------
# allocation accounting
# ---------------------------------------------------------------------------


class MemoryMeter:
    """Counts bytes held by tensor values, gradients and kernel scratch."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.live = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        with self._lock:
            self.live += nbytes
            if self.live > self.peak:
                self.peak = self.live

    def free(self, nbytes: int) -> None:
        with self._lock:
            self.live -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.live

    @contextlib.contextmanager
    def scratch(self, *arrays_or_sizes) -> Iterator[None]:
        """Account for temporaries a fused kernel holds outside any Tensor."""
        total = builtins.sum(a if isinstance(a, int) else a.nbytes for a in arrays_or_sizes)
        self.alloc(total)
        try:
            yield
        finally:
            self.free(total)


memory = MemoryMeter()


# ---------------------------------------------------------------------------
# per-thread state
# ---------------------------------------------------------------------------


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: list[Tensor] = []
        self.grad_enabled = True
        self.debug = os.environ.get("HYPF_DEBUG_NAN", "") == "1"


_state = _State()


def tape_size() -> int:
    return len(_state.tape)


def clear_tape() -> None:
    for node in _state.tape:
        node._parents = ()
        node._backward = None
    _state.tape.clear()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


def set_debug(flag: bool) -> None:
    """Raise :class:`NumericalError` as soon as a primitive yields NaN/inf."""
    _state.debug = bool(flag)


# Test hook: scale the backward of one named primitive, used to prove that
# gradient checking catches a wrong derivative.
_CORRUPT = os.environ.get("HYPF_CORRUPT_GRAD", "")


def _corrupt_target() -> str:
    return os.environ.get("HYPF_CORRUPT_GRAD", _CORRUPT)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        self.data = _as_array(data, dtype)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        memory.alloc(self.data.nbytes)

    def __del__(self) -> None:
        try:
            memory.free(self.data.nbytes)
            if self._grad is not None:
                memory.free(self._grad.nbytes)
        except Exception:  # interpreter shutdown
            pass

    # -- gradient storage -------------------------------------------------
    @property
    def grad(self) -> np.ndarray | None:
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        if self._grad is not None:
            memory.free(self._grad.nbytes)
        self._grad = None if value is None else np.asarray(value)
        if self._grad is not None:
            memory.alloc(self._grad.nbytes)

    def zero_grad(self) -> None:
        self.grad = None

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _result_dtype(*ts: Tensor):
    return np.result_type(*[t.dtype for t in ts])


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"{op}: only tensors of rank <= 2 are supported")
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    sa = (1,) * (2 - a.ndim) + a.shape
    sb = (1,) * (2 - b.ndim) + b.shape
    for x, y in zip(sa, sb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _state.debug and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by '{op}'")
    out = Tensor(data)
    out.op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _state.tape.append(out)
    return out


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires gradients.

    The tape is cleared afterwards; leaf ``.grad`` buffers are kept and keep
    accumulating until :func:`zero_grad` is called on them.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not loss.requires_grad:
        clear_tape()
        return
    loss.grad = np.ones_like(loss.data)
    target = _corrupt_target()
    try:
        for node in reversed(tape):
            g = node._grad
            if g is None or node._backward is None:
                continue
            grads = node._backward(g)
            if target and node.op == target:
                grads = tuple(None if x is None else 1.5 * x for x in grads)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg, dtype=parent.dtype), parent.shape)
                if parent._grad is None:
                    parent.grad = np.array(pg, copy=True)
                else:
                    parent._grad += pg
            node.grad = None
    finally:
        clear_tape()


# ---------------------------------------------------------------------------
# elementwise binary primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        gb = g / bd
        return gb, -gb * out

    return _record(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def pow(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    if isinstance(exponent, Tensor):
        raise TypeError("pow only supports a constant exponent")
    ad = a.data
    p = float(exponent)
    out = np.power(ad, p)
    if p == 2.0:
        return _record(out, (a,), lambda g: (g * 2.0 * ad,), "pow")

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(ad, p - 1.0)
        d = np.where(np.isfinite(d), d, 0.0).astype(ad.dtype, copy=False)
        return (g * d,)

    return _record(out, (a,), bw, "pow")


def maximum(a: Tensor, floor: float) -> Tensor:
    """Clamp from below by a constant; gradient passes only where a > floor."""
    ad = a.data
    mask = ad > floor
    out = np.where(mask, ad, np.asarray(floor, dtype=ad.dtype))
    return _record(out, (a,), lambda g: (g * mask,), "maximum")


def minimum(a: Tensor, ceil: float) -> Tensor:
    ad = a.data
    mask = ad < ceil
    out = np.where(mask, ad, np.asarray(ceil, dtype=ad.dtype))
    return _record(out, (a,), lambda g: (g * mask,), "minimum")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    mask = (ad > lo) & (ad < hi)
    out = np.clip(ad, lo, hi)
    return _record(out, (a,), lambda g: (g * mask,), "clamp")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is a constant."""
    mask = np.asarray(mask, dtype=bool)
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b, "where")
    out = np.where(mask, a.data, b.data)
    return _record(out, (a, b), lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)), "where")


# ---------------------------------------------------------------------------
# elementwise unary primitives
# ---------------------------------------------------------------------------


def sqrt(a: Tensor) -> Tensor:
    """Square root of max(a, 0); derivative denominator guarded by GUARD."""
    ad = a.data
    out = np.sqrt(np.maximum(ad, 0.0))
    return _record(out, (a,), lambda g: (g * 0.5 / np.maximum(out, GUARD),), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    ad = a.data
    return _record(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a: Tensor) -> Tensor:
    # relu'(0) = 0
    ad = a.data
    mask = ad > 0
    return _record(np.where(mask, ad, 0.0).astype(ad.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad)
    sig = np.exp(ad - out)
    return _record(out, (a,), lambda g: (g * sig,), "softplus")


def cosh(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.cosh(ad), (a,), lambda g: (g * np.sinh(ad),), "cosh")


def sinh(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.sinh(ad), (a,), lambda g: (g * np.cosh(ad),), "sinh")


def arcosh(a: Tensor, floor: float = 1.0) -> Tensor:
    """arcosh(max(a, floor)); the derivative at the clamp is guarded."""
    ad = np.maximum(a.data, floor)
    out = np.arccosh(ad)
    mask = a.data > floor

    def bw(g):
        return (g * mask / np.sqrt(np.maximum(ad * ad - 1.0, GUARD)),)

    return _record(out, (a,), bw, "arcosh")


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def rowwise_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row, returned as an N x 1 column."""
    ad = a.data
    out = np.sqrt(np.sum(ad * ad, axis=1, keepdims=True))
    return _record(out, (a,), lambda g: (g * ad / np.maximum(out, GUARD),), "rowwise_norm")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T, (a,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            parts.append(g[:, lo:hi] if axis == 1 else g[lo:hi])
        return tuple(parts)

    return _record(out, tuple(tensors), bw, "concat")


def slice_columns(a: Tensor, start: int, stop: int | None = None) -> Tensor:
    shape = a.shape
    cols = slice(start, stop)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, cols] = g
        return (full,)

    return _record(a.data[:, cols], (a,), bw, "slice_columns")


def take_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), bw, "take_rows")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {exc}") from None
    return _record(np.array(out), (a,), lambda g: (g,), "broadcast")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def spmm(matrix, a: Tensor) -> Tensor:
    """Constant (possibly scipy-sparse) matrix times a dense tensor."""
    out = np.asarray(matrix @ a.data)
    mt = matrix.T
    return _record(out, (a,), lambda g: (np.asarray(mt @ g),), "spmm")


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax using the log-sum-exp shift."""
    ad = a.data
    shifted = ad - ad.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _record(out, (a,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),), "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    e = np.exp(ad - ad.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], inputs: Tensor | Iterable[Tensor], h: float = 1e-5) -> float:
    """Compare reverse-mode gradients with central finite differences.

    ``f`` is a zero-argument closure returning a scalar Tensor and reading
    the current values of ``inputs``.  Returns the maximum over all input
    coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    clear_tape()
    backward(f())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, ana in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = flat[i]
                fp = float(f().data)
                flat[i] = orig - h
                lo = flat[i]
                fm = float(f().data)
                flat[i] = orig
                # divide by the step actually taken, not the nominal 2h
                num = (fp - fm) / float(hi - lo)
                err = np.abs(ana_flat[i] - num) / max(1.0, np.abs(ana_flat[i]))
                worst = max(worst, float(err))
    for t, (rg, g) in zip(inputs, saved):
        t.requires_grad = rg
        t.grad = g
    return worst


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class Module:
    """Holds parameters and child modules; tracks train/eval mode."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        """Trainable tensors, each once even when shared between submodules.

        Frozen tensors still appear in named_parameters.
        """
        seen, out = set(), []
        for _, p in self.named_parameters():
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if name.startswith("buf_") and isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None
