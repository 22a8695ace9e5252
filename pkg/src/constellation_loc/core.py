"""Shared data model: semantic objects, maps, constellations, graphs, descriptors, poses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """Inputs break an operation's preconditions (kind/dimension/label mismatch)."""


class DegenerateInput(ValueError):
    """Inputs are well-formed but too small or empty for the operation."""


class NotFound(KeyError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y <= 0.0:
        y += 2.0 * math.pi
    return y - math.pi


@dataclass(frozen=True)
class SemanticObject:
    instance_id: int
    class_label: int
    position: tuple[float, float, float]

    def __post_init__(self):
        if self.instance_id < 0:
            raise ContractViolation(f"instance_id must be >= 0, got {self.instance_id}")
        if self.class_label < 0:
            raise ContractViolation(f"class_label must be >= 0, got {self.class_label}")
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ContractViolation(f"position must be 3 finite values, got {self.position}")
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True, eq=False)
class ObjectMap:
    """A set of labeled object centroids, stored column-wise.

    ``frame_tag`` is ``"global"`` for prior maps and ``"local"`` for query
    local semantic maps (QLSMs) expressed in the observer's frame.
    """

    ids: np.ndarray
    labels: np.ndarray
    positions: np.ndarray
    n_classes: int
    frame_tag: str = "global"

    def __post_init__(self):
        ids = _frozen(self.ids, np.int64).reshape(-1)
        labels = _frozen(self.labels, np.int64).reshape(-1)
        pos = _frozen(self.positions, np.float64).reshape(-1, 3)
        if not (len(ids) == len(labels) == len(pos)):
            raise ContractViolation("ids, labels and positions differ in length")
        if self.n_classes < 1:
            raise ContractViolation("n_classes must be >= 1")
        if len(np.unique(ids)) != len(ids):
            raise ContractViolation("instance ids must be unique")
        if len(ids) and (ids.min() < 0 or labels.min() < 0 or labels.max() >= self.n_classes):
            raise ContractViolation("negative id or class label outside [0, n_classes)")
        if not np.all(np.isfinite(pos)):
            raise ContractViolation("positions must be finite")
        if self.frame_tag not in ("global", "local"):
            raise ContractViolation(f"frame_tag must be 'global' or 'local', got {self.frame_tag!r}")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "positions", pos)

    @classmethod
    def from_objects(cls, objects: Iterable[SemanticObject], n_classes: int, frame_tag="global"):
        objects = list(objects)
        return cls(
            ids=[o.instance_id for o in objects],
            labels=[o.class_label for o in objects],
            positions=np.array([o.position for o in objects], dtype=float).reshape(-1, 3),
            n_classes=n_classes,
            frame_tag=frame_tag,
        )

    def __len__(self):
        return len(self.ids)

    @property
    def objects(self) -> list[SemanticObject]:
        return [
            SemanticObject(int(i), int(c), tuple(p))
            for i, c, p in zip(self.ids, self.labels, self.positions)
        ]

    def index_of(self, instance_id: int) -> int:
        hits = np.flatnonzero(self.ids == instance_id)
        if len(hits) == 0:
            raise NotFound(f"instance id {instance_id} not in map")
        return int(hits[0])

    def subset(self, mask_or_index) -> "ObjectMap":
        return ObjectMap(
            self.ids[mask_or_index],
            self.labels[mask_or_index],
            self.positions[mask_or_index],
            self.n_classes,
            self.frame_tag,
        )

    def with_positions(self, positions, frame_tag=None) -> "ObjectMap":
        return ObjectMap(self.ids, self.labels, positions, self.n_classes, frame_tag or self.frame_tag)

    def same_as(self, other: "ObjectMap") -> bool:
        return (
            self.n_classes == other.n_classes
            and self.frame_tag == other.frame_tag
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.positions, other.positions)
        )


@dataclass(frozen=True, eq=False)
class Constellation:
    """A center object plus its neighbors; ``positions`` are relative to ``origin``.

    Members are stored in instance-id order. ``center_index`` points at the
    center row, whose relative position is the zero vector.
    """

    ids: np.ndarray
    labels: np.ndarray
    positions: np.ndarray
    center_index: int
    origin: np.ndarray
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "ids", _frozen(self.ids, np.int64).reshape(-1))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64).reshape(-1))
        object.__setattr__(self, "positions", _frozen(self.positions, np.float64).reshape(-1, 3))
        object.__setattr__(self, "origin", _frozen(self.origin, np.float64).reshape(3))
        if not 0 <= self.center_index < len(self.ids):
            raise ContractViolation("center_index out of range")

    def __len__(self):
        return len(self.ids)

    @property
    def center(self) -> SemanticObject:
        i = self.center_index
        return SemanticObject(int(self.ids[i]), int(self.labels[i]), tuple(self.origin + self.positions[i]))

    @property
    def members(self) -> list[SemanticObject]:
        return [
            SemanticObject(int(i), int(c), tuple(self.origin + p))
            for i, c, p in zip(self.ids, self.labels, self.positions)
        ]

    @property
    def center_id(self) -> int:
        return int(self.ids[self.center_index])

    def replace(self, keep=None, labels=None, positions=None) -> "Constellation":
        """Return a copy with rows filtered by ``keep`` and/or new labels/positions."""
        ids, labs, pos = self.ids, self.labels if labels is None else labels, (
            self.positions if positions is None else positions
        )
        center = self.center_index
        if keep is not None:
            keep = np.asarray(keep, dtype=bool)
            if not keep[center]:
                raise ContractViolation("the center object cannot be removed")
            center = int(np.count_nonzero(keep[:center]))
            ids, labs, pos = ids[keep], np.asarray(labs)[keep], np.asarray(pos)[keep]
        return Constellation(ids, labs, pos, center, self.origin, self.n_classes)


@dataclass(frozen=True, eq=False)
class ConstellationGraph:
    """Nodes with class labels and origin-relative positions, plus undirected edges.

    ``edges`` is an (m, 2) array with ``i <= j``; self-loops appear as ``(i, i)``
    with distance 0.
    """

    labels: np.ndarray
    positions: np.ndarray
    edges: np.ndarray
    distances: np.ndarray
    center_index: int
    n_classes: int
    ids: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64).reshape(-1))
        object.__setattr__(self, "positions", _frozen(self.positions, np.float64).reshape(-1, 3))
        object.__setattr__(self, "edges", _frozen(self.edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "distances", _frozen(self.distances, np.float64).reshape(-1))
        if self.ids is not None:
            object.__setattr__(self, "ids", _frozen(self.ids, np.int64).reshape(-1))

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def self_loops(self) -> np.ndarray:
        return self.edges[:, 0] == self.edges[:, 1]

    def adjacency(self) -> np.ndarray:
        """Dense symmetric boolean adjacency, self-loops on the diagonal."""
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        a[self.edges[:, 0], self.edges[:, 1]] = True
        a[self.edges[:, 1], self.edges[:, 0]] = True
        return a

    def neighbors(self, i: int, include_self=True) -> np.ndarray:
        adj = self.adjacency()[i].copy()
        if not include_self:
            adj[i] = False
        return np.flatnonzero(adj)


@dataclass(frozen=True, eq=False)
class Descriptor:
    """``kind`` is ``"vector"`` (real array) or ``"walk_matrix"`` (n_w x l_w labels)."""

    kind: str
    payload: np.ndarray

    def __post_init__(self):
        if self.kind == "vector":
            p = _frozen(self.payload, np.float64).reshape(-1)
            if not np.all(np.isfinite(p)):
                raise ContractViolation("vector descriptor has non-finite entries")
        elif self.kind == "walk_matrix":
            p = _frozen(self.payload, np.int64)
            if p.ndim != 2:
                raise ContractViolation("walk_matrix payload must be 2-D")
        else:
            raise ContractViolation(f"unknown descriptor kind {self.kind!r}")
        object.__setattr__(self, "payload", p)

    @property
    def shape(self):
        return self.payload.shape


def matched_rows(a: np.ndarray, b: np.ndarray) -> int:
    """Size of the multiset intersection of the rows of two label matrices."""
    from collections import Counter

    ca = Counter(map(tuple, np.asarray(a).tolist()))
    cb = Counter(map(tuple, np.asarray(b).tolist()))
    return sum((ca & cb).values())


def descriptor_distance(a: Descriptor, b: Descriptor) -> float:
    """L2 distance for vectors; 1 - matched-row fraction for walk matrices."""
    if a.kind != b.kind:
        raise ContractViolation(f"descriptor kinds differ: {a.kind} vs {b.kind}")
    if a.shape != b.shape:
        raise ContractViolation(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    if a.kind == "vector":
        return float(np.linalg.norm(a.payload - b.payload))
    n_rows = a.shape[0]
    if n_rows == 0:
        return 0.0
    return 1.0 - matched_rows(a.payload, b.payload) / n_rows


@dataclass(frozen=True)
class PoseSE2z:
    """Planar rigid transform; z passes through unchanged."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        out = p.copy()
        out[:, :2] = p[:, :2] @ self.rotation.T + (self.x, self.y)
        return out[0] if single else out

    def inverse(self) -> "PoseSE2z":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return PoseSE2z(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def compose(self, other: "PoseSE2z") -> "PoseSE2z":
        """``self ∘ other``: apply ``other`` first."""
        tx, ty = self.rotation @ (other.x, other.y)
        return PoseSE2z(tx + self.x, ty + self.y, self.yaw + other.yaw)


def apply_pose(pose: PoseSE2z, p) -> np.ndarray:
    return pose.apply(p)


# --- map file IO -----------------------------------------------------------


def write_map(path, m: ObjectMap, extra_header: Sequence[str] = ()) -> None:
    lines = [f"# n_classes={m.n_classes}", f"# frame={m.frame_tag}"]
    lines += [f"# {h}" for h in extra_header]
    for i, c, (x, y, z) in zip(m.ids.tolist(), m.labels.tolist(), m.positions.tolist()):
        lines.append(f"{i},{c},{x!r},{y!r},{z!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_map(path) -> ObjectMap:
    n_classes = None
    frame = "global"
    ids, labels, pos = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key.strip() == "n_classes":
                n_classes = int(value)
            elif key.strip() == "frame":
                frame = value.strip()
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 comma-separated fields, got {len(parts)}")
        try:
            ids.append(int(parts[0]))
            labels.append(int(parts[1]))
            pos.append([float(v) for v in parts[2:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if n_classes is None:
        raise ValueError(f"{path}: missing '# n_classes=<k>' header")
    return ObjectMap(ids, labels, np.array(pos, dtype=float).reshape(-1, 3), n_classes, frame)
