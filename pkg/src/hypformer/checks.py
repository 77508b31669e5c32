"""Finite-difference gradient checks grouped by subsystem.

Every case builds a small double-precision problem, reduces its output to a
scalar through fixed random weights, and compares reverse-mode gradients for
inputs, parameters and curvatures against central differences.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import Attention, MultiHead
from .autodiff import Tensor
from .blocks import HRC, HTC, Activation, BatchNorm, Dropout, LayerNorm, PositionalEncoding, compose, hyp_concat, hyp_residual
from .data import normalized_adjacency
from .geometry import (
    CurvatureParam,
    LorentzBatch,
    _inner_rows,
    distance,
    exp_map,
    lift_euclidean,
    log_map,
    lorentz_midpoint,
)
from .model import Hypformer, HypformerConfig
from .training import cross_entropy

GROUPS = ("geometry", "blocks", "attention", "model")
TOLERANCE = 1e-4
STEP = 1e-5


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum(out * w)


def _params(*modules) -> list[Tensor]:
    out = []
    for m in modules:
        out += [p for _, p in m.named_parameters()]
    return out


def _geometry(rng) -> dict[str, float]:
    n, d = 5, 4
    kp = CurvatureParam(1.7)
    fx = Tensor(0.6 * rng.standard_normal((n, d)))
    fy = Tensor(0.6 * rng.standard_normal((n, d)))
    v = Tensor(0.5 * rng.standard_normal((n, d + 1)))
    wts = Tensor(rng.uniform(0.2, 1.0, size=(3, n)))
    probe_pt = _probe(rng, (n, d + 1))
    probe_col = _probe(rng, (n, 1))
    probe_mid = _probe(rng, (3, d + 1))

    def tangent(x: LorentzBatch) -> Tensor:
        return v - x.k * _inner_rows(x.data, v) * x.data

    def f_lift():
        return _weighted(lift_euclidean(fx, kp).data, probe_pt)

    def f_exp():
        x = lift_euclidean(fx, kp)
        return _weighted(exp_map(x, tangent(x)).data, probe_pt)

    def f_log():
        x, y = lift_euclidean(fx, kp), lift_euclidean(fy, kp)
        return _weighted(log_map(x, y).data, probe_pt)

    def f_distance():
        x, y = lift_euclidean(fx, kp), lift_euclidean(fy, kp)
        return _weighted(distance(x, y), probe_col)

    def f_exp_log():
        x, y = lift_euclidean(fx, kp), lift_euclidean(fy, kp)
        back = exp_map(x, log_map(x, y))
        return _weighted(distance(back, y) ** 2 + distance(x, back), probe_col)

    def f_midpoint():
        return _weighted(lorentz_midpoint(lift_euclidean(fx, kp), wts).data, probe_mid)

    base = [fx, kp.raw]
    return {
        "geometry.lift": ad.grad_check(f_lift, base, STEP),
        "geometry.exp_map": ad.grad_check(f_exp, base + [v], STEP),
        "geometry.log_map": ad.grad_check(f_log, base + [fy], STEP),
        "geometry.distance": ad.grad_check(f_distance, base + [fy], STEP),
        "geometry.exp_log_roundtrip": ad.grad_check(f_exp_log, base + [fy], STEP),
        "geometry.midpoint": ad.grad_check(f_midpoint, base + [wts], STEP),
    }


def _blocks(rng) -> dict[str, float]:
    n, d, d2 = 6, 4, 3
    k1, k2 = CurvatureParam(1.0), CurvatureParam(2.5)
    fx = Tensor(0.6 * rng.standard_normal((n, d)))
    probe_d = _probe(rng, (n, d + 1))
    probe_d2 = _probe(rng, (n, d2 + 1))
    probe_cat = _probe(rng, (n, d + d2 + 1))
    htc = HTC(d, d2, k1, k2, rng=rng)
    htc.bias.data = 0.1 * rng.standard_normal(htc.bias.shape)
    ln = HRC(LayerNorm(d), k1, k2)
    ln.fns[0].gain.data = rng.uniform(0.5, 1.5, (1, d))
    ln.fns[0].shift.data = 0.1 * rng.standard_normal((1, d))
    act = compose(HRC(Dropout(0.3), k1), HRC(Activation("tanh"), k1))
    bn = HRC(BatchNorm(d), k1)
    pe = PositionalEncoding(d, k1, eps=0.7, rng=rng)
    other = HTC(d, d, k1, k1, rng=rng)
    side = HTC(d, d2, k1, k1, rng=rng)

    def f_htc():
        return _weighted(htc(lift_euclidean(fx, k1)).data, probe_d2)

    def f_layernorm():
        return _weighted(ln(lift_euclidean(fx, k1)).data, probe_d)

    def f_dropout_activation():
        act.fns[1]._rng = np.random.default_rng(7)  # same mask on every evaluation
        return _weighted(act(lift_euclidean(fx, k1)).data, probe_d)

    def f_batchnorm():
        return _weighted(bn(lift_euclidean(fx, k1)).data, probe_d)

    def f_concat():
        x = lift_euclidean(fx, k1)
        return _weighted(hyp_concat(x, side(x)).data, probe_cat)

    def f_residual_pe():
        x = lift_euclidean(fx, k1)
        return _weighted(hyp_residual(pe(x), other(x)).data, probe_d)

    x_and_k = [fx, k1.raw]
    return {
        "blocks.htc": ad.grad_check(f_htc, x_and_k + [k2.raw] + _params(htc), STEP),
        "blocks.layernorm": ad.grad_check(f_layernorm, x_and_k + [k2.raw] + _params(ln), STEP),
        "blocks.dropout_activation": ad.grad_check(f_dropout_activation, x_and_k, STEP),
        "blocks.batchnorm": ad.grad_check(f_batchnorm, x_and_k + _params(bn), STEP),
        "blocks.concat": ad.grad_check(f_concat, x_and_k + _params(side), STEP),
        "blocks.residual_positional": ad.grad_check(f_residual_pe, x_and_k + _params(pe, other), STEP),
    }


def _attention(rng) -> dict[str, float]:
    n, d, da = 6, 4, 3
    k1, k2, k3 = CurvatureParam(1.0), CurvatureParam(2.0), CurvatureParam(3.0)
    fx = Tensor(0.6 * rng.standard_normal((n, d)))
    probe = _probe(rng, (n, da + 1))
    out = {}
    for kind in ("linear", "softmax"):
        att = Attention(d, da, k1, k2, k3, kind=kind, rng=rng)
        for h in (att.wq, att.wk, att.wv):
            h.bias.data = 0.2 * rng.standard_normal(h.bias.shape)

        def f(att=att):
            return _weighted(att(lift_euclidean(fx, att.k1)).data, probe)

        out[f"attention.{kind}"] = ad.grad_check(f, [fx] + _params(att), STEP)
    mh = MultiHead(2, d, da, k1, k2, k3, rng=rng, kind="linear")

    def f_mh():
        return _weighted(mh(lift_euclidean(fx, k1)).data, probe)

    out["attention.multihead"] = ad.grad_check(f_mh, [fx] + _params(mh), STEP)
    return out


def _model(rng) -> dict[str, float]:
    n, d, classes = 8, 5, 3
    features = 0.6 * rng.standard_normal((n, d))
    labels = rng.integers(0, classes, size=n)
    edges = np.array([[i, i + 1] for i in range(n - 1)])
    adj = normalized_adjacency(edges, n)
    out = {}
    for kind in ("linear", "softmax"):
        cfg = HypformerConfig(d_in=d, d_out=classes, d_hidden=8, layers=1, attention=kind,
                              seed=int(rng.integers(1 << 31)), kappa_hidden=2.0)
        model = Hypformer(cfg)
        model.fusion.data = 0.3 * rng.standard_normal((1, 2))
        for _, p in model.named_parameters():
            if p.shape[:1] == (1,) and np.all(p.data == 0) and p.ndim == 2:
                p.data = 0.1 * rng.standard_normal(p.shape)  # non-zero biases exercise every path

        def f(model=model):
            return cross_entropy(model(features, adj), labels, np.arange(n))

        out[f"model.{kind}"] = ad.grad_check(f, _params(model), STEP)
    return out


CASES: dict[str, Callable] = {
    "geometry": _geometry,
    "blocks": _blocks,
    "attention": _attention,
    "model": _model,
}


def run_checks(groups="all", seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per case, in a fixed order."""
    if groups == "all":
        groups = GROUPS
    elif isinstance(groups, str):
        groups = tuple(g.strip() for g in groups.split(","))
    unknown = [g for g in groups if g not in CASES]
    if unknown:
        raise ValueError(f"unknown gradient-check groups {unknown}; choose from {GROUPS} or 'all'")
    results: dict[str, float] = {}
    for g in groups:
        rng = np.random.default_rng([seed, GROUPS.index(g)])
        results.update(CASES[g](rng))
    return results
