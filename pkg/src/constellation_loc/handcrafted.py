"""Baseline constellation descriptors: Onion, Onion-Histogram, Random-Walk, GOS vertex/graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Constellation, ConstellationGraph, ContractViolation, Descriptor, ObjectMap


@dataclass(frozen=True)
class HandcraftedConfig:
    n_shells: int = 3
    shell_spacing: float = 10.0
    walk_length: int = 4
    n_walks: int = 30
    gos_distance_bin: float = 2.0
    gos_max_distance: float = 60.0

    def __post_init__(self):
        for name in ("n_shells", "shell_spacing", "walk_length", "n_walks", "gos_distance_bin",
                     "gos_max_distance"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive")

    @property
    def gos_bins(self) -> int:
        return int(np.ceil(self.gos_max_distance / self.gos_distance_bin))


def _shell_index(c: Constellation, cfg: HandcraftedConfig):
    """Shell of each non-center member, with -1 for members outside the shells."""
    others = np.ones(len(c), dtype=bool)
    others[c.center_index] = False
    r = np.linalg.norm(c.positions[others], axis=1)
    k = np.floor(r / cfg.shell_spacing).astype(np.int64)
    k[k >= cfg.n_shells] = -1
    return k, c.labels[others]


def onion(c: Constellation, cfg: HandcraftedConfig = HandcraftedConfig()) -> Descriptor:
    k, _ = _shell_index(c, cfg)
    return Descriptor("vector", np.bincount(k[k >= 0], minlength=cfg.n_shells).astype(float))


def onion_hist(c: Constellation, cfg: HandcraftedConfig = HandcraftedConfig()) -> Descriptor:
    """Per-shell class histogram, flattened shell-major."""
    k, labels = _shell_index(c, cfg)
    ok = k >= 0
    flat = k[ok] * c.n_classes + labels[ok]
    return Descriptor("vector", np.bincount(flat, minlength=cfg.n_shells * c.n_classes).astype(float))


def random_walk(g: ConstellationGraph, cfg: HandcraftedConfig = HandcraftedConfig(), seed=0) -> Descriptor:
    """``n_walks`` uniform random walks of ``walk_length`` steps from the center.

    Rows hold the labels of visited nodes, excluding the start node. A walk
    only follows its self-loop when the node has no other neighbor.
    """
    rng = np.random.default_rng(seed)
    adj = g.adjacency()
    np.fill_diagonal(adj, False)
    nbrs = [np.flatnonzero(row) for row in adj]
    out = np.empty((cfg.n_walks, cfg.walk_length), dtype=np.int64)
    for w in range(cfg.n_walks):
        node = g.center_index
        for step in range(cfg.walk_length):
            if len(nbrs[node]):
                node = int(nbrs[node][rng.integers(len(nbrs[node]))])
            out[w, step] = g.labels[node]
    return Descriptor("walk_matrix", out)


def gos_vertex(qlsm: ObjectMap | Constellation) -> Descriptor:
    """Class histogram over every object of a local map."""
    return Descriptor("vector", np.bincount(qlsm.labels, minlength=qlsm.n_classes).astype(float))


def class_pair_index(a, b, n_classes: int):
    """Index of the unordered class pair {a, b} in the upper triangle (row-major)."""
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return lo * n_classes - lo * (lo - 1) // 2 + (hi - lo)


def gos_graph(g: ConstellationGraph, cfg: HandcraftedConfig = HandcraftedConfig()) -> Descriptor:
    """Edge histogram over (unordered class pair, distance bin); self-loops excluded."""
    n_pairs = g.n_classes * (g.n_classes + 1) // 2
    e = g.edges[~g.self_loops]
    d = g.distances[~g.self_loops]
    ok = d < cfg.gos_max_distance
    e, d = e[ok], d[ok]
    pair = class_pair_index(g.labels[e[:, 0]], g.labels[e[:, 1]], g.n_classes)
    b = np.minimum(np.floor(d / cfg.gos_distance_bin).astype(np.int64), cfg.gos_bins - 1)
    hist = np.bincount(pair * cfg.gos_bins + b, minlength=n_pairs * cfg.gos_bins)
    return Descriptor("vector", hist.astype(float))
