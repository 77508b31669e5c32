"""Lorentz-model primitives.

Points are rows ``(x_t, x_s)`` of an ``N x (d+1)`` tensor lying on the upper
sheet ``<x, x>_L = 1/k, x_t > 0`` for a curvature ``k < 0``.  The curvature is
carried alongside the coordinates so that operations can refuse to mix
manifolds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor

# sinh/cosh arguments are clipped to this magnitude
MAX_ARG = 80.0
ZERO_TANGENT = 1e-12
ARCOSH_FLOOR = 1.0 + 1e-12
MIDPOINT_FLOOR = 1e-8
CONSTRAINT_TOL = 1e-8


class InvalidCurvatureError(ValueError):
    pass


class CurvatureMismatchError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ManifoldError(ValueError):
    """A batch violates the hyperboloid constraint."""


def _softplus_inverse(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


class CurvatureParam(Module):
    """Negative curvature parametrized as ``k = -softplus(raw)``."""

    def __init__(self, magnitude: float = 1.0, trainable: bool = True, dtype=np.float64) -> None:
        if not magnitude > 0:
            raise InvalidCurvatureError(f"curvature magnitude must be > 0, got {magnitude}")
        self.raw = Tensor(np.array(_softplus_inverse(magnitude), dtype=dtype), requires_grad=trainable)

    @property
    def trainable(self) -> bool:
        return self.raw.requires_grad

    def value(self) -> Tensor:
        return -ad.softplus(self.raw)

    def __float__(self) -> float:
        return -float(np.logaddexp(0.0, self.raw.data))

    def __repr__(self) -> str:
        return f"CurvatureParam(k={float(self):.6g}, trainable={self.trainable})"


def as_curvature(k, dtype=None) -> Tensor:
    """Coerce a float, Tensor or :class:`CurvatureParam` to a scalar Tensor."""
    if isinstance(k, CurvatureParam):
        k = k.value()
    if isinstance(k, Tensor):
        val = k.data
    else:
        k = Tensor(np.asarray(k, dtype=dtype or np.float64))
        val = k.data
    if k.size != 1 or not np.all(val < 0) or not np.all(np.isfinite(val)):
        raise InvalidCurvatureError(f"curvature must be a negative finite scalar, got {val}")
    return k


def minkowski(d: int, dtype=np.float64) -> np.ndarray:
    """Row vector (-1, 1, ..., 1) implementing the Lorentzian signature."""
    sig = np.ones((1, d + 1), dtype=dtype)
    sig[0, 0] = -1.0
    return sig


@dataclass
class LorentzBatch:
    data: Tensor
    k: Tensor

    def __post_init__(self) -> None:
        if not isinstance(self.data, Tensor):
            self.data = Tensor(self.data)
        if self.data.ndim != 2 or self.data.shape[1] < 2:
            raise ValueError(f"Lorentz batch needs shape N x (d+1) with d >= 1, got {self.data.shape}")
        self.k = as_curvature(self.k, self.data.dtype if not isinstance(self.k, Tensor) else None)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1] - 1

    @property
    def time(self) -> Tensor:
        return ad.slice_columns(self.data, 0, 1)

    @property
    def space(self) -> Tensor:
        return ad.slice_columns(self.data, 1)

    @property
    def kappa(self) -> float:
        return float(self.k.data)

    def numpy(self) -> np.ndarray:
        return self.data.data

    def residual(self) -> np.ndarray:
        """Per-row ``|k <x, x>_L - 1|``."""
        x = self.data.data
        inner = -x[:, 0] ** 2 + np.sum(x[:, 1:] ** 2, axis=1)
        return np.abs(self.kappa * inner - 1.0)

    def check(self, tol: float = CONSTRAINT_TOL, where: str = "") -> None:
        res = self.residual()
        bad = (res > tol) | ~np.isfinite(res) | ~(self.data.data[:, 0] > 0)
        if np.any(bad):
            row = int(np.argmax(bad))
            label = f" at {where}" if where else ""
            raise ManifoldError(
                f"hyperboloid constraint violated{label}: row {row} residual {res[row]:.3e}"
            )


@dataclass
class TangentBatch:
    data: Tensor
    base: LorentzBatch


def _same_curvature(x: LorentzBatch, y: LorentzBatch) -> None:
    if x.k is y.k:
        return
    if not np.isclose(x.kappa, y.kappa, rtol=1e-12, atol=0.0):
        raise CurvatureMismatchError(f"curvatures differ: {x.kappa} vs {y.kappa}")


def _inner_rows(x: Tensor, y: Tensor) -> Tensor:
    sig = minkowski(x.shape[1] - 1, x.dtype)
    return ad.sum(x * y * sig, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def origin(d: int, k, dtype=np.float64) -> LorentzBatch:
    if d < 1:
        raise ValueError("dimension must be >= 1")
    kt = as_curvature(k, dtype)
    time = ad.reshape(ad.sqrt(-1.0 / kt), (1, 1))
    if time.dtype != dtype and not time.requires_grad:
        time = Tensor(time.data, dtype=dtype)
    return LorentzBatch(ad.concat([time, Tensor(np.zeros((1, d), dtype=time.dtype))], axis=1), kt)


def lorentz_inner(x: LorentzBatch | Tensor, y: LorentzBatch | Tensor) -> Tensor:
    """Row-wise ``-x_t y_t + x_s . y_s`` as an N x 1 column."""
    xd = x.data if isinstance(x, LorentzBatch) else ad._lift(x)
    yd = y.data if isinstance(y, LorentzBatch) else ad._lift(y)
    if xd.shape != yd.shape:
        raise ad.ShapeError(f"lorentz_inner: shapes {xd.shape} and {yd.shape} differ")
    return _inner_rows(xd, yd)


def project_to_manifold(space, k) -> LorentzBatch:
    """Attach the time coordinate ``sqrt(|x_s|^2 - 1/k)`` to space-like rows."""
    space = ad._lift(space)
    kt = as_curvature(k, space.dtype if not isinstance(k, (Tensor, CurvatureParam)) else None)
    sq = ad.sum(space * space, axis=1, keepdims=True)
    time = ad.sqrt(sq - 1.0 / kt)
    return LorentzBatch(ad.concat([time, space], axis=1), kt)


def recalibrate(space: Tensor, k_from, k_to) -> LorentzBatch:
    """Scale space-like rows by ``sqrt(k_from/k_to)`` and rebuild the time axis.

    This is the shared tail of every curvature-changing block.
    """
    k_from = as_curvature(k_from)
    k_to = as_curvature(k_to)
    if k_from is not k_to:
        space = space * ad.sqrt(k_from / k_to)
    return project_to_manifold(space, k_to)


def exp_map(x: LorentzBatch, u: TangentBatch | Tensor) -> LorentzBatch:
    ud = u.data if isinstance(u, TangentBatch) else ad._lift(u, x.data)
    if ud.shape != x.data.shape:
        raise ad.ShapeError(f"exp_map: tangent shape {ud.shape} vs base {x.data.shape}")
    k = x.k
    sqk = ad.sqrt(-k)
    uu = _inner_rows(ud, ud)
    scale = max(1.0, float(np.max(np.abs(ud.data))) ** 2)
    if np.any(uu.data < -CONSTRAINT_TOL * scale):
        raise DomainError("exp_map: tangent vector is not space-like")
    norm = ad.sqrt(ad.maximum(uu, 0.0))
    small = norm.data < ZERO_TANGENT
    safe = ad.where(small, 1.0, norm)
    theta = ad.minimum(sqk * safe, MAX_ARG)
    out = ad.cosh(theta) * x.data + (ad.sinh(theta) / (sqk * safe)) * ud
    # first-order expansion at zero keeps the gradient exact there
    out = ad.where(small, x.data + ud, out)
    # rebuilding the time axis keeps the constraint at rounding level far from the origin
    return project_to_manifold(ad.slice_columns(out, 1), k)


def log_map(x: LorentzBatch, y: LorentzBatch) -> TangentBatch:
    _same_curvature(x, y)
    if x.data.shape != y.data.shape and x.n != 1:
        raise ad.ShapeError(f"log_map: shapes {x.data.shape} and {y.data.shape} differ")
    k = x.k
    xd = x.data
    if x.n == 1 and y.n > 1:
        xd = ad.broadcast_to(xd, y.data.shape)
    beta_raw = k * _inner_rows(xd, y.data)
    near = beta_raw.data < ARCOSH_FLOOR
    beta = ad.maximum(beta_raw, ARCOSH_FLOOR)
    theta = ad.arcosh(beta, ARCOSH_FLOOR)
    coef = theta / ad.sinh(ad.minimum(theta, MAX_ARG))
    far = coef * (y.data - beta * xd)
    out = ad.where(near, y.data - xd, far)
    return TangentBatch(out, LorentzBatch(xd, k))


def distance(x: LorentzBatch, y: LorentzBatch) -> Tensor:
    """Geodesic distance per row pair, as an N x 1 column."""
    _same_curvature(x, y)
    k = x.k
    beta = k * lorentz_inner(x, y)
    return ad.arcosh(beta, 1.0) / ad.sqrt(-k)


def normalize_to_manifold(u: Tensor, k) -> LorentzBatch:
    """``u / (sqrt|k| * sqrt|<u,u>_L|)`` for time-like combinations ``u``.

    Used by the weighted midpoint, positional encoding and residual merge.
    """
    k = as_curvature(k)
    uu = ad.abs(_inner_rows(u, u))
    denom = ad.maximum(ad.sqrt(-k * uu), MIDPOINT_FLOOR)
    return LorentzBatch(u / denom, k)


def lorentz_midpoint(points: LorentzBatch, weights) -> LorentzBatch:
    """Weighted Lorentzian midpoint.

    ``weights`` is either a length-M vector (one output row) or an R x M
    matrix (R output rows); entries must be non-negative.
    """
    w = ad._lift(weights, points.data)
    if w.ndim == 1:
        w = ad.reshape(w, (1, w.shape[0]))
    if np.any(w.data < 0):
        raise ValueError("midpoint weights must be non-negative")
    if np.any(np.sum(w.data, axis=1) <= 0):
        raise ValueError("midpoint needs at least one strictly positive weight per row")
    if w.shape[1] != points.n:
        raise ad.ShapeError(f"{w.shape[1]} weights for {points.n} points")
    return normalize_to_manifold(w @ points.data, points.k)


def lift_euclidean(features, k) -> LorentzBatch:
    """Map Euclidean rows onto the hyperboloid via the exponential map at the origin."""
    v = ad._lift(features)
    if not np.all(np.isfinite(v.data)):
        raise ValueError("lift_euclidean: non-finite features")
    kt = as_curvature(k, v.dtype if not isinstance(k, (Tensor, CurvatureParam)) else None)
    n, d = v.shape
    o = origin(d, kt, dtype=v.dtype)
    base = ad.broadcast_to(o.data, (n, d + 1))
    zeros = Tensor(np.zeros((n, 1), dtype=v.dtype))
    return exp_map(LorentzBatch(base, kt), ad.concat([zeros, v], axis=1))
