"""Hyperbolic self-attention: linear (focused kernel) and softmax (distance) forms."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor, memory
from .blocks import HTC, as_param, hyp_concat
from .geometry import CurvatureParam, LorentzBatch, _softplus_inverse, minkowski, normalize_to_manifold, recalibrate


class FocusMap(Module):
    """Non-negative, norm-preserving feature map ``relu(e)/t`` raised to ``power``."""

    def __init__(self, power: float = 2.0, t: float = 1.0, eps_den: float = 1e-6, trainable_t: bool = True, dtype=np.float64) -> None:
        if not power > 0:
            raise ValueError("focusing power must be positive")
        if not t > 0:
            raise ValueError("focus scale t must be positive")
        self.power = float(power)
        self.eps_den = float(eps_den)
        self.raw_t = Tensor(np.array(_softplus_inverse(t), dtype=dtype), requires_grad=trainable_t)

    def scale(self) -> Tensor:
        return ad.softplus(self.raw_t)

    def __call__(self, e) -> Tensor:
        e = ad._lift(e)
        scaled = ad.relu(e) / self.scale()
        if self.power == 1.0:
            return scaled
        powered = scaled ** self.power
        ratio = ad.rowwise_norm(scaled) / ad.maximum(ad.rowwise_norm(powered), 1e-30)
        return powered * ratio


def focus_map(rows, power: float = 2.0, t: float = 1.0) -> np.ndarray:
    """Array-in/array-out convenience wrapper around :class:`FocusMap`."""
    with ad.no_grad():
        return FocusMap(power, t, trainable_t=False)(ad.tensor(rows)).data


def linear_aggregate(q: Tensor, k: Tensor, v: Tensor, eps_den: float) -> Tensor:
    """``q (k^T v) / (q (k^T 1) + eps)`` without forming the N x N map."""
    kv = ad.transpose(k) @ v
    ksum = ad.sum(k, axis=0, keepdims=True)
    num = q @ kv
    den = q @ ad.transpose(ksum) + eps_den
    return num / den


def distance_softmax_weights(q: Tensor, k: Tensor, kappa: Tensor) -> Tensor:
    """Row-stochastic weights ``softmax_j(-d(q_i, k_j)^2 / sqrt(d'))``.

    Fused primitive with a hand-written backward so that only the angle matrix
    and the weights are held between the passes.
    """
    n_q, dp1 = q.shape
    scale = 1.0 / np.sqrt(dp1 - 1)
    sig = minkowski(dp1 - 1, q.dtype)
    qd, kd, kv = q.data, k.data, kappa.data.astype(q.dtype)

    theta = (qd * sig) @ kd.T
    theta *= kv
    np.maximum(theta, 1.0, out=theta)
    np.arccosh(theta, out=theta)
    alpha = theta * theta
    alpha *= scale / kv  # -d^2/sqrt(d') since kv < 0
    alpha -= alpha.max(axis=1, keepdims=True)
    np.exp(alpha, out=alpha)
    alpha /= alpha.sum(axis=1, keepdims=True)
    held = Tensor(theta)  # keeps the angles in the allocation count until backward

    def bw(g):
        th = held.data
        with memory.scratch(2 * th.nbytes):
            dl = g * alpha
            dl -= alpha * dl.sum(axis=1, keepdims=True)
            clipped = np.minimum(th, 80.0)
            sh = np.sinh(clipped)
            small = th < 1e-6
            ratio = np.where(small, 1.0, th / np.where(small, 1.0, sh))
            dk_term = None
            if kappa.requires_grad:
                # d(logit)/dk = (2 th coth(th) - th^2) * scale / k^2
                th_coth = np.where(small, 1.0, th * np.cosh(clipped) / np.where(small, 1.0, sh))
                dk_term = np.sum(dl * (2.0 * th_coth - th * th)) * scale / (kv * kv)
            dm = dl * ratio
            dm *= 2.0 * scale
            dq = (dm @ kd) * sig
            dk = (dm.T @ qd) * sig
        return dq, dk, dk_term

    return ad._record(alpha, (q, k, kappa), bw, "distance_softmax")


class Attention(Module):
    """One hyperbolic attention block mapping curvature k1 to k3."""

    def __init__(
        self,
        d_in: int,
        d_att: int,
        k1,
        k2=None,
        k3=None,
        kind: str = "linear",
        power: float = 2.0,
        eps_den: float = 1e-6,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ) -> None:
        if kind not in ("linear", "softmax"):
            raise ValueError(f"unknown attention kind {kind!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k1 = as_param(k1)
        self.k2 = self.k1 if k2 is None else as_param(k2)
        self.k3 = self.k2 if k3 is None else as_param(k3)
        self.kind = kind
        self.wq = HTC(d_in, d_att, self.k1, self.k2, rng=rng, dtype=dtype)
        self.wk = HTC(d_in, d_att, self.k1, self.k2, rng=rng, dtype=dtype)
        self.wv = HTC(d_in, d_att, self.k1, self.k2, rng=rng, dtype=dtype)
        bound = 1.0 / np.sqrt(d_att)
        self.psi = Tensor(rng.uniform(-bound, bound, size=(d_att, d_att)).astype(dtype), requires_grad=True)
        self.focus = FocusMap(power, eps_den=eps_den, dtype=dtype)
        self.d_in, self.d_att = d_in, d_att

    def project(self, x: LorentzBatch):
        return self.wq(x), self.wk(x), self.wv(x)

    def __call__(self, x: LorentzBatch) -> LorentzBatch:
        if x.n == 0:
            raise ValueError("attention over an empty batch")
        q, k, v = self.project(x)
        if self.kind == "linear":
            return self._linear(q, k, v)
        return self._softmax(q, k, v)

    def _linear(self, q, k, v) -> LorentzBatch:
        qs, ks, vs = self.focus(q.space), self.focus(k.space), self.focus(v.space)
        z = linear_aggregate(qs, ks, vs, self.focus.eps_den)
        z = z + vs @ self.psi
        k2 = q.k
        k3 = k2 if self.k3 is self.k2 else self.k3.value()
        return recalibrate(z, k2, k3)

    def _softmax(self, q, k, v) -> LorentzBatch:
        alpha = distance_softmax_weights(q.data, k.data, q.k)
        return normalize_to_manifold(alpha @ v.data, q.k)

    def weights(self, x: LorentzBatch) -> np.ndarray:
        """Explicit N x N attention weights (for inspection and tests)."""
        with ad.no_grad():
            q, k, _ = self.project(x)
            if self.kind == "softmax":
                return distance_softmax_weights(q.data, k.data, q.k).data
            a, b = self.focus(q.space).data, self.focus(k.space).data
            s = a @ b.T
            return s / (s.sum(axis=1, keepdims=True) + self.focus.eps_den)


def linear_attention(x: LorentzBatch, params: Attention) -> LorentzBatch:
    if params.kind != "linear":
        raise ValueError("parameters are configured for softmax attention")
    return params(x)


def softmax_attention(x: LorentzBatch, params: Attention) -> LorentzBatch:
    if params.kind != "softmax":
        raise ValueError("parameters are configured for linear attention")
    return params(x)


class MultiHead(Module):
    """Full-width heads merged by hyperbolic concatenation and an HTC."""

    def __init__(self, heads: int, d_in: int, d_att: int, k1, k2=None, k3=None, rng=None, dtype=np.float64, **kw) -> None:
        if heads < 1:
            raise ValueError("need at least one head")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.heads = [Attention(d_in, d_att, k1, k2, k3, rng=rng, dtype=dtype, **kw) for _ in range(heads)]
        out_k = self.heads[0].k2 if self.heads[0].kind == "softmax" else self.heads[0].k3
        self.merge = HTC(heads * d_att, d_att, out_k, out_k, rng=rng, dtype=dtype) if heads > 1 else None

    def __call__(self, x: LorentzBatch) -> LorentzBatch:
        if self.merge is None:
            return self.heads[0](x)
        return self.merge(hyp_concat([h(x) for h in self.heads]))


def multi_head(x: LorentzBatch, heads: MultiHead) -> LorentzBatch:
    return heads(x)
