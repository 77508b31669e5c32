"""Full encoder: lifted input, HTC embedding, attention layers, parallel GNN, decoder."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .attention import MultiHead
from .autodiff import Module, Tensor
from .blocks import HRC, HTC, Activation, Dropout, LayerNorm, PositionalEncoding, compose, hyp_residual
from .data import normalized_adjacency
from .geometry import CurvatureParam, LorentzBatch, ManifoldError, lift_euclidean, normalize_to_manifold


class ConfigError(ValueError):
    pass


@dataclass
class HypformerConfig:
    d_in: int | None = None  # None: taken from the dataset
    d_hidden: int = 32
    d_out: int | None = None  # number of classes; None: taken from the dataset
    layers: int = 2
    attention: str = "linear"
    heads: int = 1
    p: float = 2.0
    dropout: float = 0.0
    activation: str = "relu"
    use_gnn: bool = True
    use_transformer: bool = True
    gnn_layers: int = 2
    kappa_in: float = 1.0
    kappa_hidden: float = 1.0
    kappa_out: float = 1.0
    curvature_trainable: bool = True
    pe_eps: float = 1.0
    feature_norm: str = "none"
    knn_k: int = 0
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 200
    patience: int = 200
    seed: int = 0
    eval_metric: str = "accuracy"

    def validate(self) -> "HypformerConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in ("d_in", "d_out"):
            v = getattr(self, name)
            need(v is None or (isinstance(v, int) and v >= 1), f"{name} must be a positive integer")
        need(isinstance(self.d_hidden, int) and self.d_hidden >= 2, "d_hidden must be an integer >= 2")
        need(isinstance(self.layers, int) and self.layers >= 0, "layers must be >= 0")
        need(isinstance(self.heads, int) and self.heads >= 1, "heads must be >= 1")
        need(isinstance(self.gnn_layers, int) and self.gnn_layers >= (1 if self.use_gnn else 0), "gnn_layers must be >= 1 when use_gnn")
        need(self.attention in ("linear", "softmax"), "attention must be 'linear' or 'softmax'")
        need(self.activation in Activation.kinds, f"activation must be one of {sorted(Activation.kinds)}")
        need(self.eval_metric in ("accuracy", "binary_f1"), "eval_metric must be 'accuracy' or 'binary_f1'")
        need(self.feature_norm in ("none", "rowwise_l2", "standardize"), "unknown feature_norm")
        need(self.use_gnn or self.use_transformer, "at least one of use_gnn/use_transformer must be enabled")
        need(0.0 <= self.dropout < 1.0, "dropout must be in [0, 1)")
        need(self.p > 0, "p must be positive")
        need(self.pe_eps > 0, "pe_eps must be positive")
        for name in ("kappa_in", "kappa_hidden", "kappa_out"):
            need(getattr(self, name) > 0, f"{name} is a curvature magnitude and must be > 0")
        need(self.lr >= 0 and self.weight_decay >= 0, "lr and weight_decay must be >= 0")
        need(isinstance(self.epochs, int) and self.epochs >= 1, "epochs must be >= 1")
        need(isinstance(self.patience, int) and self.patience >= 1, "patience must be >= 1")
        need(isinstance(self.knn_k, int) and self.knn_k >= 0, "knn_k must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "HypformerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**raw)
        for f in fields(cls):
            v = getattr(cfg, f.name)
            if f.type.startswith("float") and isinstance(v, int) and not isinstance(v, bool):
                setattr(cfg, f.name, float(v))
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "HypformerConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "HypformerConfig":
        try:
            with open(path) as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def _debug_constraints() -> bool:
    return os.environ.get("HYPF_DEBUG_CONSTRAINTS", "") == "1"


class EncoderLayer(Module):
    def __init__(self, cfg: HypformerConfig, k: CurvatureParam, rng, drop_rng) -> None:
        d = cfg.d_hidden
        self.pe = PositionalEncoding(d, k, eps=cfg.pe_eps, rng=rng)
        self.attn = MultiHead(cfg.heads, d, d, k, k, k, rng=rng, kind=cfg.attention, power=cfg.p)
        self.norm1 = HRC(LayerNorm(d), k)
        self.ff1 = HTC(d, d, k, k, rng=rng)
        self.act = compose(HRC(Dropout(cfg.dropout, drop_rng), k), HRC(Activation(cfg.activation), k))
        self.ff2 = HTC(d, d, k, k, rng=rng)
        self.norm2 = HRC(LayerNorm(d), k)

    def __call__(self, h: LorentzBatch, trace=None) -> LorentzBatch:
        a = self.attn(self.pe(h))
        h = self.norm1(hyp_residual(h, a))
        f = self.ff2(self.act(self.ff1(h)))
        h = self.norm2(hyp_residual(h, f))
        if trace is not None:
            trace.extend([("attention", a), ("ffn", f), ("layer", h)])
        return h


class GnnBranch(Module):
    """Midpoint neighbour aggregation followed by HTC and activation, per layer."""

    def __init__(self, cfg: HypformerConfig, k_in, k_hidden, k_out, rng, drop_rng) -> None:
        dims = [cfg.d_in] + [cfg.d_hidden] * cfg.gnn_layers
        self.convs = [
            HTC(dims[i], dims[i + 1], k_in if i == 0 else k_hidden, k_hidden, rng=rng)
            for i in range(cfg.gnn_layers)
        ]
        self.act = compose(HRC(Dropout(cfg.dropout, drop_rng), k_hidden), HRC(Activation(cfg.activation), k_hidden))
        self.out = HRC(None, k_hidden, k_out)

    @staticmethod
    def aggregate(adj, x: LorentzBatch) -> LorentzBatch:
        return normalize_to_manifold(ad.spmm(adj, x.data), x.k)

    def __call__(self, x: LorentzBatch, adj, trace=None) -> LorentzBatch:
        g = x
        for i, conv in enumerate(self.convs):
            g = self.act(conv(self.aggregate(adj, g)))
            if trace is not None:
                trace.append((f"gnn.{i}", g))
        return self.out(g)


class Hypformer(Module):
    def __init__(self, config: HypformerConfig) -> None:
        cfg = config.validate()
        if cfg.d_in is None or cfg.d_out is None:
            raise ConfigError("d_in and d_out must be set before building a model")
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        drop_rng = np.random.default_rng([cfg.seed, 1])
        trainable = cfg.curvature_trainable
        self.k_in = CurvatureParam(cfg.kappa_in, trainable)
        self.k_hidden = CurvatureParam(cfg.kappa_hidden, trainable)
        self.k_out = CurvatureParam(cfg.kappa_out, trainable)
        self.embed = self.layers = self.enc_out = self.gnn = None
        if cfg.use_transformer:
            self.embed = HTC(cfg.d_in, cfg.d_hidden, self.k_in, self.k_hidden, rng=rng)
            self.layers = [EncoderLayer(cfg, self.k_hidden, rng, drop_rng) for _ in range(cfg.layers)]
            self.enc_out = HRC(None, self.k_hidden, self.k_out)
        if cfg.use_gnn:
            self.gnn = GnnBranch(cfg, self.k_in, self.k_hidden, self.k_out, rng, drop_rng)
        self.fusion = Tensor(np.zeros((1, 2)), requires_grad=cfg.use_gnn and cfg.use_transformer)
        bound = 1.0 / np.sqrt(cfg.d_hidden)
        self.dec_weight = Tensor(rng.uniform(-bound, bound, size=(cfg.d_hidden, cfg.d_out)), requires_grad=True)
        self.dec_bias = Tensor(np.zeros((1, cfg.d_out)), requires_grad=True)

    def curvatures(self) -> dict[str, float]:
        return {"kappa_in": float(self.k_in), "kappa_hidden": float(self.k_hidden), "kappa_out": float(self.k_out)}

    def prepare_adjacency(self, adjacency, n: int):
        if adjacency is None:
            if self.config.use_gnn:
                raise ValueError("the GNN branch needs an adjacency")
            return None
        if sp.issparse(adjacency):
            if adjacency.shape != (n, n):
                raise ValueError(f"adjacency shape {adjacency.shape} does not match {n} nodes")
            return adjacency
        return normalized_adjacency(adjacency, n)

    def encode(self, features, adjacency=None, trace: list | None = None) -> LorentzBatch:
        x = ad._lift(features)
        if x.ndim != 2 or x.shape[1] != self.config.d_in:
            raise ad.ShapeError(f"expected N x {self.config.d_in} features, got {x.shape}")
        adj = self.prepare_adjacency(adjacency, x.shape[0]) if self.config.use_gnn else None
        trace = [] if trace is None and _debug_constraints() else trace
        x0 = lift_euclidean(x, self.k_in)
        if trace is not None:
            trace.append(("lift", x0))
        enc = gnn = None
        if self.embed is not None:
            h = self.embed(x0)
            if trace is not None:
                trace.append(("embed", h))
            for i, layer in enumerate(self.layers):
                sub = [] if trace is not None else None
                h = layer(h, sub)
                if trace is not None:
                    trace.extend((f"layer{i}.{name}", b) for name, b in sub)
            enc = self.enc_out(h)
        if self.gnn is not None:
            gnn = self.gnn(x0, adj, trace)
        if enc is not None and gnn is not None:
            w = ad.softmax(self.fusion, axis=1)
            mixed = ad.slice_columns(w, 0, 1) * enc.data + ad.slice_columns(w, 1, 2) * gnn.data
            out = normalize_to_manifold(mixed, enc.k)
        else:
            out = enc if enc is not None else gnn
        if trace is not None:
            trace.append(("fused", out))
            if _debug_constraints():
                tol = 1e-6 if out.data.dtype == np.float32 else 1e-8
                for name, b in trace:
                    b.check(tol, where=name)
        return out

    def forward(self, features, adjacency=None, trace: list | None = None) -> Tensor:
        z = self.encode(features, adjacency, trace)
        return z.space @ self.dec_weight + self.dec_bias

    __call__ = forward


def diagnose_nonfinite(model: Hypformer, features, adjacency) -> str:
    """Name the first intermediate representation holding a non-finite value."""
    trace: list = []
    with ad.no_grad():
        try:
            model.encode(features, adjacency, trace)
        except (ManifoldError, FloatingPointError, ValueError) as exc:
            return f"forward raised {exc}"
    for i, (name, batch) in enumerate(trace):
        if not np.all(np.isfinite(batch.numpy())):
            return f"stage {i} ({name})"
    return "decoder/loss"
