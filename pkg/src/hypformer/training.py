"""Loss, metrics, Adam and the full-batch training loop."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor
from .data import DatasetError, GraphDataset, knn_graph, normalize_features, normalized_adjacency
from .geometry import CurvatureParam
from .model import Hypformer, HypformerConfig, diagnose_nonfinite

VARIANTS = ("full", "no_graph", "no_transformer")


def cross_entropy(logits: Tensor, labels, index) -> Tensor:
    """Mean negative log-likelihood over the rows in ``index``."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size == 0:
        raise ValueError("loss over an empty mask")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    classes = logits.shape[1]
    picked = labels[index]
    if np.any(picked < 0) or np.any(picked >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    onehot = np.zeros((index.size, classes), dtype=logits.dtype)
    onehot[np.arange(index.size), picked] = 1.0
    logp = ad.log_softmax(ad.take_rows(logits, index))
    return -ad.sum(logp * onehot) / float(index.size)


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred).reshape(-1), np.asarray(labels).reshape(-1)
    if pred.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(pred == labels))


def binary_f1(pred, labels) -> float:
    """F1 of the positive class (label 1)."""
    pred, labels = np.asarray(pred).reshape(-1), np.asarray(labels).reshape(-1)
    if np.any(labels > 1) or np.any(pred > 1) or np.any(labels < 0) or np.any(pred < 0):
        raise ValueError("binary F1 needs labels and predictions in {0, 1}")
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    if tp == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    return 2 * tp / (2 * tp + fp + fn)


METRICS: dict[str, Callable] = {"accuracy": accuracy, "binary_f1": binary_f1}


def score(logits: np.ndarray, labels, index, metric: str) -> float:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if metric == "binary_f1" and logits.shape[1] > 2:
        raise ValueError(f"binary F1 on a {logits.shape[1]}-class problem")
    index = np.asarray(index, dtype=np.int64)
    pred = np.argmax(logits[index], axis=1)
    return METRICS[metric](pred, np.asarray(labels)[index])


class Adam:
    """Adam with L2 weight decay; curvature scalars use a 10x smaller step and no decay."""

    def __init__(self, model: Hypformer, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, curvature_lr_scale: float = 0.1) -> None:
        curv = {id(m.raw) for m in model.modules() if isinstance(m, CurvatureParam)}
        self.groups = []
        for p in model.parameters():
            is_curv = id(p) in curv
            self.groups.append((p, curvature_lr_scale if is_curv else 1.0, 0.0 if is_curv else weight_decay))
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p, _, _ in self.groups]
        self.v = [np.zeros_like(p.data) for p, _, _ in self.groups]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for i, (p, scale, wd) in enumerate(self.groups):
            if p.grad is None:
                continue
            g = p.grad + wd * p.data if wd else p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            step = self.lr * scale * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - step


@dataclass
class Prepared:
    features: np.ndarray
    adjacency: object
    labels: np.ndarray
    splits: dict


def complete_config(config: HypformerConfig, dataset: GraphDataset) -> HypformerConfig:
    """Fill in dimensions from the dataset and check they agree."""
    cfg = replace(config)
    if cfg.d_in is None:
        cfg.d_in = dataset.dim
    if cfg.d_out is None:
        cfg.d_out = dataset.num_classes
    if cfg.d_in != dataset.dim:
        raise DatasetError("E_SHAPE", f"config d_in={cfg.d_in} but dataset has {dataset.dim} features")
    if cfg.d_out < dataset.num_classes:
        raise DatasetError("E_CLASS", f"config d_out={cfg.d_out} but dataset has {dataset.num_classes} classes")
    return cfg.validate()


def prepare(config: HypformerConfig, dataset: GraphDataset) -> Prepared:
    dataset.validate()
    features = normalize_features(dataset.features, config.feature_norm)
    adjacency = None
    if config.use_gnn:
        edges = dataset.edges
        if edges.size == 0 and config.knn_k > 0:
            edges = knn_graph(dataset.features, config.knn_k)
        adjacency = normalized_adjacency(edges, dataset.n)
    return Prepared(features, adjacency, dataset.labels, dataset.splits)


def evaluate(model: Hypformer, dataset: GraphDataset | Prepared, split: str = "test", metric: str | None = None) -> float:
    data = dataset if isinstance(dataset, Prepared) else prepare(model.config, dataset)
    if split not in data.splits:
        raise ValueError(f"unknown split {split!r}")
    metric = metric or model.config.eval_metric
    was_training = model.training
    model.eval()
    with ad.no_grad():
        logits = model(data.features, data.adjacency).data
    model.train(was_training)
    return score(logits, data.labels, data.splits[split], metric)


@dataclass
class TrainResult:
    model: Hypformer
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = -np.inf

    @property
    def best_record(self) -> dict:
        return self.history[self.best_epoch - 1]


def _snapshot(model: Hypformer) -> dict:
    state = {name: p.data.copy() for name, p in model.named_parameters()}
    state.update({name: b.copy() for name, b in model.named_buffers()})
    return state


def _restore(model: Hypformer, state: dict) -> None:
    for name, p in model.named_parameters():
        p.data = state[name].copy()
    for name, b in model.named_buffers():
        b[...] = state[name]


def train(
    config: HypformerConfig,
    dataset: GraphDataset,
    on_epoch: Callable[[dict], None] | None = None,
    model: Hypformer | None = None,
) -> TrainResult:
    """Full-batch training with early stopping on the validation metric.

    The returned model carries the parameters of the best validation epoch.
    """
    cfg = complete_config(config, dataset)
    data = prepare(cfg, dataset)
    model = model if model is not None else Hypformer(cfg)
    opt = Adam(model, cfg.lr, cfg.weight_decay)
    train_idx = data.splits["train"]
    result = TrainResult(model)
    best_state = _snapshot(model)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        model.zero_grad()
        logits = model(data.features, data.adjacency)
        loss = cross_entropy(logits, data.labels, train_idx)
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            ad.clear_tape()
            where = diagnose_nonfinite(model, data.features, data.adjacency)
            raise NumericalError(f"non-finite training loss at epoch {epoch}, first bad layer: {where}")
        ad.backward(loss)
        opt.step()

        model.eval()
        with ad.no_grad():
            out = model(data.features, data.adjacency).data
        model.train()
        kappa = float(model.k_hidden)
        if not (np.isfinite(kappa) and kappa < 0):
            raise NumericalError(f"curvature left the negative reals at epoch {epoch}: {kappa}")
        record = {
            "epoch": epoch,
            "train_loss": loss_value,
            "val_metric": score(out, data.labels, data.splits["val"], cfg.eval_metric),
            "test_metric": score(out, data.labels, data.splits["test"], cfg.eval_metric),
            "kappa_hidden": kappa,
        }
        result.history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if record["val_metric"] > result.best_val:
            result.best_val, result.best_epoch = record["val_metric"], epoch
            best_state = _snapshot(model)
        elif epoch - result.best_epoch >= cfg.patience:
            break
    _restore(model, best_state)
    return result


def variant_config(config: HypformerConfig, variant: str) -> HypformerConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {VARIANTS}")
    if variant == "no_graph":
        return replace(config, use_gnn=False)
    if variant == "no_transformer":
        return replace(config, use_transformer=False)
    return replace(config)


def ablate(config: HypformerConfig, dataset: GraphDataset, variant: str) -> float:
    """Train one branch configuration and return its best validation metric."""
    return train(variant_config(config, variant), dataset).best_val
