"""Constellation extraction and distance-threshold graph construction."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .core import (
    Constellation,
    ConstellationGraph,
    ContractViolation,
    DegenerateInput,
    ObjectMap,
)

THRESHOLD_MODES = ("mean_pairwise", "mean_nearest")


@dataclass(frozen=True)
class GraphConfig:
    """Edge threshold in meters or ``"auto"``; auto is resolved against a global map."""

    edge_threshold: float | str = "auto"
    visual_range: float = 30.0
    include_self_loops: bool = True
    threshold_mode: str = "mean_pairwise"

    def __post_init__(self):
        if self.edge_threshold != "auto" and not float(self.edge_threshold) > 0:
            raise ContractViolation("edge_threshold must be > 0 or 'auto'")
        if not self.visual_range > 0:
            raise ContractViolation("visual_range must be > 0")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ContractViolation(f"threshold_mode must be one of {THRESHOLD_MODES}")

    def resolved(self, global_map: ObjectMap) -> "GraphConfig":
        if self.edge_threshold != "auto":
            return self
        return replace(self, edge_threshold=auto_edge_threshold(global_map, self.threshold_mode))


def auto_edge_threshold(m: ObjectMap, mode: str = "mean_pairwise") -> float:
    """Average inter-object distance of a map.

    ``mean_pairwise`` averages over all unordered pairs; ``mean_nearest``
    averages each object's nearest-neighbor distance.
    """
    if len(m) < 2:
        raise DegenerateInput("auto edge threshold needs at least 2 objects")
    if mode == "mean_pairwise":
        return float(np.mean(pdist(m.positions)))
    if mode == "mean_nearest":
        d, _ = cKDTree(m.positions).query(m.positions, k=2)
        return float(np.mean(d[:, 1]))
    raise ContractViolation(f"unknown threshold mode {mode!r}")


def _within(positions: np.ndarray, center: np.ndarray, radius: float, tree: cKDTree | None = None):
    if tree is None:
        d = np.linalg.norm(positions - center, axis=1)
        return np.flatnonzero(d <= radius)
    cand = np.asarray(tree.query_ball_point(center, radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
    d = np.linalg.norm(positions[cand] - center, axis=1)
    return np.sort(cand[d <= radius])


def _constellation_from_rows(m: ObjectMap, rows: np.ndarray, center_row: int) -> Constellation:
    rows = rows[np.argsort(m.ids[rows], kind="stable")]
    origin = m.positions[center_row]
    center_index = int(np.flatnonzero(rows == center_row)[0])
    return Constellation(
        m.ids[rows], m.labels[rows], m.positions[rows] - origin, center_index, origin, m.n_classes
    )


def extract_constellation(m: ObjectMap, center_id: int, visual_range: float = 30.0) -> Constellation:
    """Center object plus every object within ``visual_range`` (inclusive)."""
    row = m.index_of(center_id)
    rows = _within(m.positions, m.positions[row], visual_range)
    return _constellation_from_rows(m, rows, row)


def extract_all_constellations(m: ObjectMap, visual_range: float = 30.0) -> list[Constellation]:
    """One constellation per object, in map row order."""
    if len(m) == 0:
        return []
    tree = cKDTree(m.positions)
    return [
        _constellation_from_rows(m, _within(m.positions, m.positions[r], visual_range, tree), r)
        for r in range(len(m))
    ]


def build_graph(c: Constellation, cfg: GraphConfig) -> ConstellationGraph:
    """Undirected edge between members at distance <= threshold, plus self-loops."""
    if len(c) == 0:
        raise DegenerateInput("empty constellation")
    if cfg.edge_threshold == "auto":
        raise ContractViolation("resolve the 'auto' edge threshold against a global map first")
    thr = float(cfg.edge_threshold)
    order = np.argsort(c.ids, kind="stable")
    pos = c.positions[order]
    n = len(pos)
    iu, ju = np.triu_indices(n, k=1)
    d = np.linalg.norm(pos[iu] - pos[ju], axis=1)
    keep = d <= thr
    edges = [np.stack([iu[keep], ju[keep]], axis=1)]
    dists = [d[keep]]
    if cfg.include_self_loops:
        ar = np.arange(n)
        edges.insert(0, np.stack([ar, ar], axis=1))
        dists.insert(0, np.zeros(n))
    return ConstellationGraph(
        labels=c.labels[order],
        positions=pos,
        edges=np.concatenate(edges).reshape(-1, 2),
        distances=np.concatenate(dists),
        center_index=int(np.flatnonzero(order == c.center_index)[0]),
        n_classes=c.n_classes,
        ids=c.ids[order],
    )


def map_graph(m: ObjectMap, cfg: GraphConfig) -> ConstellationGraph:
    """Graph over a whole map (used for whole-QLSM descriptors); center is row 0."""
    if len(m) == 0:
        raise DegenerateInput("empty map")
    c = Constellation(m.ids, m.labels, m.positions, 0, np.zeros(3), m.n_classes)
    return build_graph(c, cfg)
