"""Weighted cross-entropy training loop with Adam and exponential LR decay."""
from __future__ import annotations

import copy
import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .gat import GatModel, NumericFailure, save_checkpoint
from .graph import N_FEATURES, Rag, self_loop_edges
from .tensor import Tensor
from .volume import N_CLASSES

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
# incremented whenever a true-class probability had to be clamped
numeric_warnings: Counter = Counter()


@dataclass
class TrainConfig:
    epochs: int = 300
    graphs_per_batch: int = 6
    base_lr: float = 1e-4
    decay_rate: float = 1e-4
    class_weights: Sequence[float] | None = None
    seed: int = 0
    val_frac: float = 0.1
    log_every: int = 10

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.graphs_per_batch < 1:
            raise ValueError("graphs_per_batch must be >= 1")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.shape != (N_CLASSES,) or np.any(w <= 0):
                raise ValueError(f"class_weights must be {N_CLASSES} positive values")


@dataclass
class TrainLog:
    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    f1_wt: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    aborted: str | None = None
    skipped_steps: int = 0

    def append(self, epoch, loss, f1, lr):
        self.epoch.append(epoch)
        self.loss.append(loss)
        self.f1_wt.append(f1)
        self.lr.append(lr)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "f1_wt", "lr"])
            for row in zip(self.epoch, self.loss, self.f1_wt, self.lr):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def weighted_cross_entropy(probs: Tensor, labels, weights) -> Tensor:
    """Mean over nodes of ``-W[y] * log(P[y])`` for the true class ``y``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    w = np.asarray(weights, dtype=np.float64)
    picked = T.tsum(T.mul(probs, Tensor(np.eye(c)[labels])), axis=1)
    clamped = int(np.sum(picked.data < PROB_FLOOR))
    if clamped:
        numeric_warnings["clamped_probability"] += clamped
    logp = T.log(picked, floor=PROB_FLOOR)
    return T.mul(T.tsum(T.mul(logp, Tensor(w[labels]))), Tensor(-1.0 / n))


def inverse_frequency_weights(labels) -> np.ndarray:
    """Inverse class frequency normalized to mean 1 over the classes present."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=N_CLASSES).astype(float)
    w = np.ones(N_CLASSES)
    present = counts > 0
    inv = 1.0 / counts[present]
    w[present] = inv / inv.mean()
    return w


class Adam:
    def __init__(self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0
        self.skipped = 0

    def step(self, lr: float) -> bool:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional Adam update; ``state`` holds ``t``, ``m``, ``v`` and ``skipped``."""
    if not state:
        state.update(t=0, skipped=0, m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params])
    if not all(np.all(np.isfinite(g)) for g in grads):
        state["skipped"] += 1
        return [p.copy() for p in params], state
    state["t"] += 1
    t = state["t"]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state["m"][i] = beta1 * state["m"][i] + (1 - beta1) * g
        state["v"][i] = beta2 * state["v"][i] + (1 - beta2) * g * g
        mh = state["m"][i] / (1 - beta1 ** t)
        vh = state["v"][i] / (1 - beta2 ** t)
        out.append(p - lr * mh / (np.sqrt(vh) + eps))
    return out, state


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.base_lr * math.exp(-cfg.decay_rate * epoch)


def batch_graphs(graphs: Sequence[Rag]) -> Rag:
    """Disjoint union of graphs; node ids of later graphs are offset."""
    if not graphs:
        raise ValueError("empty batch")
    for g in graphs:
        if g.features.shape[1] != N_FEATURES:
            raise T.ContractError("feature width mismatch in batch")
    if len(graphs) == 1:
        return graphs[0]
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    feats = np.vstack([g.features for g in graphs])
    edges = np.vstack([g.edges + o for g, o in zip(graphs, offsets)])
    labels = None
    if all(g.labels is not None for g in graphs):
        labels = np.concatenate([g.labels for g in graphs])
    n2c = np.concatenate([g.node_to_cluster for g in graphs])
    return Rag(feats, edges, labels, n2c)


def f1_whole_tumor(pred, labels) -> float:
    p = np.asarray(pred) > 0
    y = np.asarray(labels) > 0
    tp = np.sum(p & y)
    denom = 2 * tp + np.sum(p & ~y) + np.sum(~p & y)
    return 1.0 if denom == 0 else float(2 * tp / denom)


def loss_on(m: GatModel, g: Rag, weights) -> float:
    src, dst = self_loop_edges(g.n_nodes, g.edges)
    probs = m.forward(g.features, src, dst)
    return weighted_cross_entropy(probs, g.labels, weights).item()


def train_step(m: GatModel, opt: Adam, g: Rag, weights, lr: float) -> float:
    src, dst = self_loop_edges(g.n_nodes, g.edges)
    opt.zero_grad()
    with T.Tape() as tape:
        probs = m.forward(g.features, src, dst)
        loss = weighted_cross_entropy(probs, g.labels, weights)
    if not loss.is_finite():
        raise NumericFailure(len(m.layers) - 1, "loss")
    tape.backward(loss)
    opt.step(lr)
    return loss.item()


def split_dataset(n: int, val_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(round(val_frac * n)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train(m: GatModel, data: Sequence[Rag], cfg: TrainConfig,
          checkpoint_path=None) -> tuple[GatModel, TrainLog]:
    """Train ``m`` in place; the best-validation parameters are restored at the end."""
    tlog = TrainLog()
    if cfg.epochs == 0:
        return m, tlog
    if not data:
        raise ValueError("empty dataset")
    if any(g.labels is None for g in data):
        raise ValueError("every training graph needs node labels")
    train_idx, val_idx = split_dataset(len(data), cfg.val_frac, cfg.seed)
    train_set = [data[i] for i in train_idx]
    val_set = [data[i] for i in val_idx] or train_set
    if cfg.class_weights is None:
        weights = inverse_frequency_weights(np.concatenate([g.labels for g in train_set]))
    else:
        weights = np.asarray(cfg.class_weights, dtype=np.float64)
    val_batch = batch_graphs(val_set)

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(m.parameters())
    best_f1, best_state = -1.0, copy.deepcopy(m.state())
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        try:
            for s in range(0, len(order), cfg.graphs_per_batch):
                batch = batch_graphs([train_set[i] for i in order[s:s + cfg.graphs_per_batch]])
                loss = train_step(m, opt, batch, weights, lr)
                total += loss * batch.n_nodes
                count += batch.n_nodes
            pred = m.forward(val_batch.features, *self_loop_edges(val_batch.n_nodes,
                                                                  val_batch.edges)).data
        except NumericFailure as exc:
            log.error("epoch %d aborted: %s", epoch, exc)
            tlog.aborted = str(exc)
            break
        f1 = f1_whole_tumor(pred.argmax(axis=1), val_batch.labels)
        tlog.append(epoch, total / count, f1, lr)
        if f1 > best_f1:
            best_f1, tlog.best_epoch = f1, epoch
            best_state = copy.deepcopy(m.state())
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, m, {"epoch": epoch, "f1_wt": f1})
        if cfg.log_every and (epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1):
            log.info("epoch %d loss %.5f f1_wt %.4f lr %.3g", epoch, total / count, f1, lr)
    tlog.skipped_steps = opt.skipped
    m.load_state(best_state)
    return m, tlog
