"""Graph network mapping a constellation graph to a fixed-length descriptor.

Pipeline: class-label encoding -> residual stack of Max-Relative graph
convolutions -> fusion (FC over all layer outputs, graph max-pool broadcast
back) -> per-node MLP head -> gated attention pooling over nodes.
Graphs are processed as dense padded batches with boolean adjacency.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..core import ConstellationGraph, ContractViolation, DegenerateInput, Descriptor, ObjectMap
from ..extractors import DescriptorDB, Extractor, config_hash
from ..graph import GraphConfig, build_graph, extract_all_constellations

ENCODINGS = ("xyz", "xyz_integer", "xyz_onehot", "xyz_embed")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GnnConfig:
    """``position_scale`` multiplies coordinates before the first layer;
    ``normalize`` scales each descriptor to unit length; ``norm`` optionally
    adds per-node layer normalization inside each convolution."""

    input_encoding: str = "xyz_embed"
    embed_dim: int = 3
    n_layers: int = 14
    hidden_dim: int = 64
    fusion_dim: int = 256
    head_dims: tuple[int, ...] = (256, 128)
    descriptor_dim: int = 64
    margin: float = 0.2
    n_classes: int = 20
    position_scale: float = 0.1
    normalize: bool = True
    norm: str = "none"

    def __post_init__(self):
        if self.input_encoding not in ENCODINGS:
            raise ContractViolation(f"input_encoding must be one of {ENCODINGS}")
        if min(self.embed_dim, self.hidden_dim, self.descriptor_dim, self.fusion_dim, self.n_classes) < 1:
            raise ContractViolation("dimensions must be positive")
        if self.n_layers < 1:
            raise ContractViolation("n_layers must be >= 1")
        if self.norm not in ("none", "layer"):
            raise ContractViolation("norm must be 'none' or 'layer'")
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))

    @property
    def input_dim(self) -> int:
        return {
            "xyz": 3,
            "xyz_integer": 4,
            "xyz_onehot": 3 + self.n_classes,
            "xyz_embed": 3 + self.embed_dim,
        }[self.input_encoding]


@dataclass
class GraphBatch:
    positions: torch.Tensor  # (B, N, 3)
    labels: torch.Tensor  # (B, N) long
    node_mask: torch.Tensor  # (B, N) bool
    adjacency: torch.Tensor  # (B, N, N) bool, padding rows carry a self-loop only

    @classmethod
    def from_graphs(cls, graphs: list[ConstellationGraph], dtype=torch.float32) -> "GraphBatch":
        if not graphs:
            raise DegenerateInput("empty batch")
        b, n = len(graphs), max(g.n_nodes for g in graphs)
        pos = np.zeros((b, n, 3))
        lab = np.zeros((b, n), dtype=np.int64)
        mask = np.zeros((b, n), dtype=bool)
        adj = np.broadcast_to(np.eye(n, dtype=bool), (b, n, n)).copy()
        for k, g in enumerate(graphs):
            m = g.n_nodes
            if m == 0:
                raise DegenerateInput("graph without nodes")
            pos[k, :m] = g.positions
            lab[k, :m] = g.labels
            mask[k, :m] = True
            adj[k, :m, :m] = g.adjacency()
        return cls(
            torch.as_tensor(pos, dtype=dtype),
            torch.as_tensor(lab),
            torch.as_tensor(mask),
            torch.as_tensor(adj),
        )


class _NeighborMax(torch.autograd.Function):
    """out[b, i, f] = max_{j adjacent to i} x[b, j, f]; backward routes through argmax only."""

    @staticmethod
    def forward(ctx, x, bias):
        vals, idx = (x.unsqueeze(1) + bias).max(dim=2)
        ctx.save_for_backward(idx)
        return vals

    @staticmethod
    def backward(ctx, grad):
        (idx,) = ctx.saved_tensors
        return torch.zeros_like(grad).scatter_add_(1, idx, grad), None


def adjacency_bias(adjacency: torch.Tensor, dtype) -> torch.Tensor:
    """(B, N, N, 1) additive mask: 0 on edges, -inf elsewhere."""
    bias = torch.zeros(adjacency.shape, dtype=dtype)
    return bias.masked_fill_(~adjacency, -torch.inf).unsqueeze(-1)


def max_relative(x: torch.Tensor, adjacency: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Elementwise max over neighbors j of (x_j - x_i); x is (B, N, F).

    Uses max_j (x_j - x_i) = (max_j x_j) - x_i.
    """
    if bias is None:
        bias = adjacency_bias(adjacency, x.dtype)
    if torch.is_grad_enabled() and x.requires_grad:
        agg = _NeighborMax.apply(x, bias)
    else:
        agg = (x.unsqueeze(1) + bias).amax(dim=2)
    return agg - x


def attention_pool(x: torch.Tensor, node_mask: torch.Tensor, gate: nn.Module, theta: nn.Module) -> torch.Tensor:
    """sum_n softmax_n(gate(x_n)) * theta(x_n), softmax over nodes per channel."""
    if not bool(node_mask.any(dim=1).all()):
        raise DegenerateInput("attention pooling over a graph with no nodes")
    logits = gate(x).masked_fill(~node_mask.unsqueeze(-1), -torch.inf)
    weights = torch.softmax(logits, dim=1)
    return (weights * theta(x)).sum(dim=1)


class MaxRelativeConv(nn.Module):
    """x' = relu(W [x ; max_j (x_j - x_i)] + b), plus x when the widths agree.

    With ``norm="layer"`` the pre-activation is layer-normalized per node.
    """

    def __init__(self, d_in: int, d_out: int, norm: str = "none"):
        super().__init__()
        self.fc = nn.Linear(2 * d_in, d_out)
        self.norm = nn.LayerNorm(d_out) if norm == "layer" else nn.Identity()
        self.residual = d_in == d_out

    def forward(self, x, adjacency, bias=None):
        h = torch.relu(self.norm(self.fc(torch.cat([x, max_relative(x, adjacency, bias)], dim=-1))))
        return h + x if self.residual else h


class GnnModel(nn.Module):
    def __init__(self, cfg: GnnConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.n_classes, cfg.embed_dim)
        widths = [cfg.input_dim] + [cfg.hidden_dim] * cfg.n_layers
        self.convs = nn.ModuleList(MaxRelativeConv(a, b, cfg.norm) for a, b in zip(widths[:-1], widths[1:]))
        stacked = cfg.hidden_dim * cfg.n_layers
        self.fusion = nn.Linear(stacked, cfg.fusion_dim)
        head, d = [], cfg.fusion_dim + stacked
        for width in cfg.head_dims:
            head += [nn.Linear(d, width), nn.ReLU()]
            d = width
        self.head = nn.Sequential(*head)
        self.gate = nn.Linear(d, cfg.descriptor_dim)
        self.theta = nn.Linear(d, cfg.descriptor_dim)

    def encode(self, batch: GraphBatch) -> torch.Tensor:
        cfg = self.cfg
        if bool((batch.labels >= cfg.n_classes).any()) or bool((batch.labels < 0).any()):
            raise ContractViolation(f"class label outside [0, {cfg.n_classes})")
        dtype = self.fusion.weight.dtype
        xyz = batch.positions.to(dtype) * cfg.position_scale
        if cfg.input_encoding == "xyz":
            return xyz
        if cfg.input_encoding == "xyz_integer":
            # labels enter as 1..n_classes
            return torch.cat([xyz, (batch.labels + 1).unsqueeze(-1).to(dtype)], dim=-1)
        if cfg.input_encoding == "xyz_onehot":
            onehot = nn.functional.one_hot(batch.labels, cfg.n_classes).to(dtype)
            return torch.cat([xyz, onehot], dim=-1)
        return torch.cat([xyz, self.embedding(batch.labels)], dim=-1)

    def node_features(self, batch: GraphBatch) -> torch.Tensor:
        """Per-node features entering the attention pooling."""
        x = self.encode(batch)
        bias = adjacency_bias(batch.adjacency, x.dtype)
        outs = []
        for conv in self.convs:
            x = conv(x, batch.adjacency, bias)
            outs.append(x)
        stacked = torch.cat(outs, dim=-1)
        fused = torch.relu(self.fusion(stacked))
        fused = fused.masked_fill(~batch.node_mask.unsqueeze(-1), -torch.inf).amax(dim=1, keepdim=True)
        fused = fused.expand(-1, stacked.shape[1], -1)
        return self.head(torch.cat([fused, stacked], dim=-1))

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        r = attention_pool(self.node_features(batch), batch.node_mask, self.gate, self.theta)
        if self.cfg.normalize:
            r = r / torch.sqrt((r * r).sum(-1, keepdim=True) + 1e-12)
        return r

    @torch.no_grad()
    def embed(self, graphs: list[ConstellationGraph], batch_size: int = 64) -> np.ndarray:
        """Descriptors for many graphs; batches are formed by graph size to limit padding."""
        was_training = self.training
        self.eval()
        dtype = self.fusion.weight.dtype
        out = np.zeros((len(graphs), self.cfg.descriptor_dim))
        order = np.argsort([g.n_nodes for g in graphs], kind="stable")
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            batch = GraphBatch.from_graphs([graphs[i] for i in idx], dtype=dtype)
            out[idx] = self(batch).double().numpy()
        self.train(was_training)
        return out


def encode_inputs(g: ConstellationGraph, model: GnnModel) -> np.ndarray:
    """Input feature matrix of one graph under the model's encoding."""
    with torch.no_grad():
        return model.encode(GraphBatch.from_graphs([g], dtype=model.fusion.weight.dtype))[0].double().numpy()


def forward(g: ConstellationGraph, model: GnnModel) -> Descriptor:
    return Descriptor("vector", model.embed([g])[0])


class GnnExtractor(Extractor):
    name = "gnn"

    def __init__(self, model: GnnModel, graph_cfg: GraphConfig, batch_size: int = 64):
        super().__init__(graph_cfg)
        self.model = model
        self.batch_size = batch_size

    def describe(self, m: ObjectMap) -> DescriptorDB:
        cs = extract_all_constellations(m, self.graph_cfg.visual_range)
        graphs = [build_graph(c, self.graph_cfg) for c in cs]
        payload = self.model.embed(graphs, self.batch_size) if graphs else np.zeros((0, self.model.cfg.descriptor_dim))
        return DescriptorDB(self.name, "vector", m.ids, payload,
                            config_hash(self.graph_cfg, self.model.cfg))


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: GnnModel, extra: dict | None = None, optimizer=None) -> None:
    """Versioned JSON header + config + flat float arrays, in one .npz file."""
    header = {"version": CHECKPOINT_VERSION, "gnn_config": asdict(model.cfg), "extra": extra or {}}
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = dict(zip(map(id, model.parameters()), (k for k, _ in model.named_parameters())))
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p, {})
                for key, val in st.items():
                    arrays[f"adam/{names[id(p)]}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path, optimizer_factory=None):
    """Return (model, extra, optimizer-or-None)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {header.get('version')}")
        cfg = GnnConfig(**header["gnn_config"])
        model = GnnModel(cfg)
        state = {k[len("param/"):]: torch.as_tensor(z[k]) for k in z.files if k.startswith("param/")}
        model.to(next(iter(state.values())).dtype)
        model.load_state_dict(state)
        opt = None
        if optimizer_factory is not None:
            opt = optimizer_factory(model)
            params = dict(model.named_parameters())
            adam = {}
            for k in z.files:
                if k.startswith("adam/"):
                    _, name, key = k.split("/", 2)
                    adam.setdefault(name, {})[key] = torch.as_tensor(z[k])
            for name, st in adam.items():
                opt.state[params[name]] = st
    return model, header["extra"], opt
