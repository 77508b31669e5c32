"""Curvature-aware hyperbolic building blocks.

``HTC`` is a linear map on the full ``(d+1)``-vector followed by time-axis
recalibration at a new curvature.  ``HRC`` applies a Euclidean function to the
space-like coordinates only and recalibrates the time axis.  LayerNorm,
BatchNorm, dropout, activations and concatenation are all HRC instances.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .geometry import (
    CurvatureMismatchError,
    CurvatureParam,
    LorentzBatch,
    _same_curvature,
    normalize_to_manifold,
    recalibrate,
)


def as_param(k) -> CurvatureParam:
    """Wrap a plain negative float as a frozen curvature."""
    if isinstance(k, CurvatureParam):
        return k
    return CurvatureParam(-float(k), trainable=False)


def _values(k_in: CurvatureParam, k_out: CurvatureParam, x: LorentzBatch | None = None):
    ki = k_in.value()
    if x is not None:
        if not np.isclose(x.kappa, float(ki.data), rtol=1e-12, atol=0.0):
            raise CurvatureMismatchError(
                f"input lives at curvature {x.kappa}, block expects {float(ki.data)}"
            )
        ki = x.k
    ko = ki if k_out is k_in else k_out.value()
    return ki, ko


class HTC(Module):
    """Hyperbolic linear transformation with input/output curvatures."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        k_in,
        k_out=None,
        rng: np.random.Generator | None = None,
        bias: bool = True,
        dtype=np.float64,
    ) -> None:
        if d_in < 1 or d_out < 1:
            raise ValueError("HTC dimensions must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k_in = as_param(k_in)
        self.k_out = self.k_in if k_out is None else as_param(k_out)
        bound = 1.0 / np.sqrt(d_in + 1)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(d_in + 1, d_out)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((1, d_out), dtype=dtype), requires_grad=bias)
        self.d_in, self.d_out = d_in, d_out

    def linear(self, x: LorentzBatch) -> Tensor:
        return x.data @ self.weight + self.bias

    def __call__(self, x: LorentzBatch) -> LorentzBatch:
        if x.dim != self.d_in:
            raise ad.ShapeError(f"HTC expects dimension {self.d_in}, got {x.dim}")
        ki, ko = _values(self.k_in, self.k_out, x)
        return recalibrate(self.linear(x), ki, ko)


# ---------------------------------------------------------------------------
# space-like functions
# ---------------------------------------------------------------------------


class SpaceFn(Module):
    def __call__(self, s: Tensor, training: bool) -> Tensor:
        raise NotImplementedError


class Identity(SpaceFn):
    def __call__(self, s, training):
        return s


class Activation(SpaceFn):
    kinds = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid}

    def __init__(self, kind: str = "relu") -> None:
        if kind not in self.kinds:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def __call__(self, s, training):
        return self.kinds[self.kind](s)


class Dropout(SpaceFn):
    """Inverted dropout; the identity in eval mode."""

    def __init__(self, rate: float = 0.0, rng: np.random.Generator | None = None) -> None:
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self._rng = rng if rng is not None else np.random.default_rng(0)

    def __call__(self, s, training):
        if not training or self.rate == 0.0:
            return s
        keep = self._rng.random(s.shape) >= self.rate
        return s * (keep.astype(s.dtype) / (1.0 - self.rate))


class LayerNorm(SpaceFn):
    def __init__(self, d: int, eps: float = ad.GUARD, dtype=np.float64) -> None:
        if d < 2:
            raise ValueError("layernorm needs at least 2 space-like dimensions")
        self.gain = Tensor(np.ones((1, d), dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros((1, d), dtype=dtype), requires_grad=True)
        self.eps = eps

    def normalize(self, s: Tensor) -> Tensor:
        if s.shape[1] < 2:
            raise ValueError("layernorm needs at least 2 space-like dimensions")
        centered = s - ad.mean(s, axis=1, keepdims=True)
        var = ad.mean(centered * centered, axis=1, keepdims=True)
        return centered / ad.sqrt(var + self.eps)

    def __call__(self, s, training):
        return self.normalize(s) * self.gain + self.shift


class BatchNorm(SpaceFn):
    """Column normalization over the batch with running statistics."""

    def __init__(self, d: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float64) -> None:
        self.gain = Tensor(np.ones((1, d), dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros((1, d), dtype=dtype), requires_grad=True)
        self.buf_mean = np.zeros((1, d), dtype=dtype)
        self.buf_var = np.ones((1, d), dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, s, training):
        if training:
            mu = ad.mean(s, axis=0, keepdims=True)
            centered = s - mu
            var = ad.mean(centered * centered, axis=0, keepdims=True)
            m = self.momentum
            self.buf_mean[...] = m * self.buf_mean + (1 - m) * mu.data
            self.buf_var[...] = m * self.buf_var + (1 - m) * var.data
            normed = centered / ad.sqrt(var + self.eps)
        else:
            normed = (s - self.buf_mean) / np.sqrt(self.buf_var + self.eps)
        return normed * self.gain + self.shift


# ---------------------------------------------------------------------------
# HRC
# ---------------------------------------------------------------------------


class HRC(Module):
    """Space-like refinement ``fns`` (applied left to right) plus recalibration."""

    def __init__(self, fns: SpaceFn | Sequence[SpaceFn] | None, k_in, k_out=None) -> None:
        if fns is None:
            fns = []
        elif isinstance(fns, SpaceFn):
            fns = [fns]
        for f in fns:
            if not isinstance(f, SpaceFn):
                raise TypeError(f"unknown space-like function {f!r}")
        self.fns = list(fns)
        self.k_in = as_param(k_in)
        self.k_out = self.k_in if k_out is None else as_param(k_out)

    def refine(self, s: Tensor) -> Tensor:
        for f in self.fns:
            s = f(s, self.training)
        return s

    def __call__(self, x: LorentzBatch) -> LorentzBatch:
        ki, ko = _values(self.k_in, self.k_out, x)
        return recalibrate(self.refine(x.space), ki, ko)


def compose(outer: HRC | SpaceFn, inner: HRC | SpaceFn) -> HRC:
    """Fuse ``outer . inner`` into one HRC with a single time recalibration."""
    def parts(b):
        return (b.fns, b.k_in, b.k_out) if isinstance(b, HRC) else ([b], None, None)

    fo, ko_in, ko_out = parts(outer)
    fi, ki_in, ki_out = parts(inner)
    k_in = ki_in or ko_in
    if k_in is None:
        raise ValueError("compose needs at least one HRC carrying curvatures")
    k_out = ko_out or ki_out or k_in
    fused = HRC(list(fi) + list(fo), k_in, k_out)
    fused.training = getattr(outer, "training", True) and getattr(inner, "training", True)
    return fused


def hyp_activation(x: LorentzBatch, kind: str = "relu") -> LorentzBatch:
    return recalibrate(Activation(kind)(x.space, False), x.k, x.k)


def hyp_dropout(x: LorentzBatch, rate: float, training: bool, rng: np.random.Generator | None = None) -> LorentzBatch:
    return recalibrate(Dropout(rate, rng)(x.space, training), x.k, x.k)


def hyp_layernorm(x: LorentzBatch, gain=None, shift=None) -> LorentzBatch:
    ln = LayerNorm(x.dim, dtype=x.data.dtype)
    s = ln.normalize(x.space)
    if gain is not None:
        s = s * gain
    if shift is not None:
        s = s + shift
    return recalibrate(s, x.k, x.k)


def hyp_concat(*batches: LorentzBatch) -> LorentzBatch:
    """Concatenate space-like parts and rebuild the time axis."""
    if len(batches) == 1 and isinstance(batches[0], (list, tuple)):
        batches = tuple(batches[0])
    first = batches[0]
    for b in batches[1:]:
        if b.n != first.n:
            raise ad.ShapeError(f"hyp_concat: batch sizes {first.n} and {b.n} differ")
        _same_curvature(first, b)
    space = ad.concat([b.space for b in batches], axis=1)
    return recalibrate(space, first.k, first.k)


def hyp_residual(x: LorentzBatch, y: LorentzBatch) -> LorentzBatch:
    """Midpoint-style residual merge of two batches on one manifold."""
    if x.data.shape != y.data.shape:
        raise ad.ShapeError(f"hyp_residual: shapes {x.data.shape} and {y.data.shape} differ")
    _same_curvature(x, y)
    return normalize_to_manifold(x.data + y.data, x.k)


class PositionalEncoding(Module):
    """``x + eps * HTC(x)`` renormalized onto the hyperboloid."""

    def __init__(self, d: int, k, eps: float = 1.0, rng: np.random.Generator | None = None, dtype=np.float64) -> None:
        if not eps > 0:
            raise ValueError("positional magnitude must be positive")
        self.htc = HTC(d, d, k, k, rng=rng, dtype=dtype)
        self.eps = float(eps)

    def __call__(self, x: LorentzBatch) -> LorentzBatch:
        return hyp_positional_encoding(x, self.htc(x), self.eps)


def hyp_positional_encoding(x: LorentzBatch, p: LorentzBatch, eps: float = 1.0) -> LorentzBatch:
    if p.data.shape != x.data.shape:
        raise ad.ShapeError(f"position vectors {p.data.shape} do not match input {x.data.shape}")
    _same_curvature(x, p)
    return normalize_to_manifold(x.data + eps * p.data, x.k)
