"""Batch-hard triplet training with topK-ratio model selection."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import cdist

from ..core import ContractViolation, DegenerateInput
from ..graph import GraphConfig, build_graph
from ..synth import TripletDataset
from .model import GnnConfig, GnnModel, GraphBatch

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "train_loss", "val_loss", "train_topK", "val_topK")


@dataclass(frozen=True)
class TrainConfig:
    """Adam with a step decay: lr * lr_decay ** (epoch // decay_every)."""

    lr: float = 1e-3
    lr_decay: float = 0.7
    decay_every: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 100
    anchors_per_batch: int = 8
    samples_per_anchor: int = 4
    top_k: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractViolation("lr must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ContractViolation("lr_decay must be in (0, 1]")
        if self.anchors_per_batch < 2 or self.samples_per_anchor < 2:
            raise ContractViolation("batches need >= 2 anchors with >= 2 samples each")


def pairwise_distances(emb: torch.Tensor) -> torch.Tensor:
    sq = ((emb.unsqueeze(1) - emb.unsqueeze(0)) ** 2).sum(-1)
    # clamp keeps the gradient finite for coincident embeddings
    return torch.sqrt(sq.clamp_min(1e-12))


def batch_triplet_loss(emb: torch.Tensor, labels, margin: float) -> torch.Tensor:
    """Batch-hard triplet loss, averaged over anchors that have a positive."""
    labels = torch.as_tensor(labels)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    if bool(same.all()):
        raise ContractViolation("batch has a single label, so no negatives exist")
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_mask = same & ~eye
    has_pos = pos_mask.any(1)
    if not bool(has_pos.any()):
        raise ContractViolation("batch has no label with two samples")
    d = pairwise_distances(emb)
    hardest_pos = torch.where(pos_mask, d, torch.zeros_like(d)).max(1).values
    hardest_neg = torch.where(~same, d, torch.full_like(d, torch.inf)).min(1).values
    loss = torch.relu(margin + hardest_pos - hardest_neg)
    return loss[has_pos].mean()


def topk_ratio(emb: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of samples with a same-label sample among their k nearest others."""
    emb = np.asarray(emb, dtype=float)
    labels = np.asarray(labels)
    n = len(emb)
    if n < k + 1:
        raise DegenerateInput(f"need at least k+1={k + 1} embeddings, got {n}")
    d = cdist(emb, emb)
    np.fill_diagonal(d, np.inf)
    nearest = np.argpartition(d, k - 1, axis=1)[:, :k]
    return float(np.mean((labels[nearest] == labels[:, None]).any(1)))


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    train_topK: float
    val_topK: float


@dataclass
class TrainResult:
    model: GnnModel
    metrics: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0
    last_model: GnnModel | None = None
    optimizer: torch.optim.Optimizer | None = None


def _batches(groups: list[np.ndarray], cfg: TrainConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """P anchors x A samples per batch; every sample is visited about once per epoch."""
    rounds: dict[int, list] = {}
    for label, members in enumerate(groups):
        members = rng.permutation(members)
        for s in range(0, len(members), cfg.samples_per_anchor):
            part = members[s : s + cfg.samples_per_anchor]
            if len(part) >= 2:
                rounds.setdefault(s // cfg.samples_per_anchor, []).append((label, part))
    out = []
    # labels are distinct within a round, so batches never repeat a label
    for r in sorted(rounds):
        chunks = [rounds[r][i] for i in rng.permutation(len(rounds[r]))]
        for s in range(0, len(chunks), cfg.anchors_per_batch):
            cur = chunks[s : s + cfg.anchors_per_batch]
            if len(cur) >= 2:
                out.append(cur)
            elif out and s > 0:
                out[-1] = out[-1] + cur
    return [
        (np.concatenate([p for _, p in b]), np.concatenate([np.full(len(p), l) for l, p in b]))
        for b in out
    ]


def _split_groups(dataset: TripletDataset, anchors: np.ndarray):
    """Sample index lists per anchor (into dataset.samples) for the given anchors."""
    starts = np.concatenate([[0], np.cumsum([1 + len(p) for p in dataset.positives])])
    return [np.arange(starts[a], starts[a + 1]) for a in anchors]


def _eval(model, graphs, groups, cfg: TrainConfig, margin: float, rng) -> tuple[float, float]:
    idx = np.concatenate(groups)
    labels = np.concatenate([np.full(len(g), i) for i, g in enumerate(groups)])
    emb = model.embed([graphs[i] for i in idx])
    pos = {s: r for r, s in enumerate(idx)}
    losses = []
    with torch.no_grad():
        for b_idx, b_lab in _batches(groups, cfg, rng):
            e = torch.as_tensor(emb[[pos[s] for s in b_idx]])
            losses.append(float(batch_triplet_loss(e, b_lab, margin)))
    k = min(cfg.top_k, len(idx) - 1)
    topk = topk_ratio(emb, labels, k) if k >= 1 else float("nan")
    return (float(np.mean(losses)) if losses else float("nan")), topk


def train(
    dataset: TripletDataset,
    gnn_cfg: GnnConfig,
    train_cfg: TrainConfig,
    graph_cfg: GraphConfig,
    model: GnnModel | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> TrainResult:
    """Train from scratch (or resume), keeping the checkpoint with the best val topK.

    Ties on val topK go to the lower val loss. ``on_epoch(metrics, model)``
    is called after every epoch.
    """
    if len(dataset) < 2:
        raise DegenerateInput("need at least 2 anchors")
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed + start_epoch)
    if model is None:
        model = GnnModel(gnn_cfg)
    if optimizer is None:
        optimizer = make_optimizer(model, train_cfg)
    result = TrainResult(model=copy.deepcopy(model), best_epoch=start_epoch)
    if train_cfg.epochs <= start_epoch:
        result.last_model, result.optimizer = model, optimizer
        return result

    graphs = [build_graph(c, graph_cfg) for c in dataset.samples]
    train_groups = _split_groups(dataset, dataset.train_anchors)
    val_groups = _split_groups(dataset, dataset.val_anchors)
    best_key = None
    for epoch in range(start_epoch, train_cfg.epochs):
        t0 = time.perf_counter()
        for group in optimizer.param_groups:
            group["lr"] = train_cfg.lr * train_cfg.lr_decay ** (epoch // train_cfg.decay_every)
        model.train()
        losses = []
        for b_idx, b_lab in _batches(train_groups, train_cfg, rng):
            batch = GraphBatch.from_graphs([graphs[i] for i in b_idx], dtype=model.fusion.weight.dtype)
            loss = batch_triplet_loss(model(batch), b_lab, gnn_cfg.margin)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        eval_rng = np.random.default_rng(train_cfg.seed)
        _, train_topk = _eval(model, graphs, train_groups, train_cfg, gnn_cfg.margin, eval_rng)
        if val_groups:
            val_loss, val_topk = _eval(model, graphs, val_groups, train_cfg, gnn_cfg.margin, eval_rng)
        else:
            val_loss, val_topk = float("nan"), train_topk
        m = EpochMetrics(epoch + 1, float(np.mean(losses)) if losses else float("nan"), val_loss,
                         train_topk, val_topk)
        result.metrics.append(m)
        key = (val_topk, -val_loss if np.isfinite(val_loss) else 0.0)
        if best_key is None or key > best_key:
            best_key = key
            result.model = copy.deepcopy(model)
            result.best_epoch = epoch + 1
        log.info("epoch %d loss %.4f/%.4f top%d %.3f/%.3f (%.1fs)", m.epoch, m.train_loss, m.val_loss,
                 train_cfg.top_k, m.train_topK, m.val_topK, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(m, model)
    result.last_model, result.optimizer = model, optimizer
    return result


def make_optimizer(model: GnnModel, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def write_metrics(path, metrics: list[EpochMetrics], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_FIELDS)
        for m in metrics:
            w.writerow([m.epoch, repr(m.train_loss), repr(m.val_loss), repr(m.train_topK), repr(m.val_topK)])


def read_metrics(path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        return [
            EpochMetrics(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                         float(r["train_topK"]), float(r["val_topK"]))
            for r in csv.DictReader(fh)
        ]
