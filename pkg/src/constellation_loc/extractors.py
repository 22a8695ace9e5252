"""Per-object descriptor extraction over maps, and the descriptor database file format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import handcrafted as hc
from .core import ContractViolation, Descriptor, ObjectMap
from .graph import GraphConfig, build_graph, extract_all_constellations, map_graph

EXTRACTOR_NAMES = ("onion", "onion_hist", "random_walk", "gos_graph", "gos_vertex", "gnn")


def config_hash(*cfgs) -> str:
    blob = json.dumps([asdict(c) if hasattr(c, "__dataclass_fields__") else c for c in cfgs],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(eq=False)
class DescriptorDB:
    """Descriptors for every object of one map, row-aligned with ``ids``.

    ``payload`` is (n, d) for vectors and (n, n_w, l_w) for walk matrices.
    """

    name: str
    kind: str
    ids: np.ndarray
    payload: np.ndarray
    config_hash: str = ""

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        want = np.float64 if self.kind == "vector" else np.int64
        self.payload = np.asarray(self.payload, dtype=want)
        if len(self.payload) != len(self.ids):
            raise ContractViolation("payload rows and ids differ in length")

    def __len__(self):
        return len(self.ids)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.payload.shape[1:])

    def descriptor(self, row: int) -> Descriptor:
        return Descriptor(self.kind, self.payload[row])

    def check_compatible(self, other: "DescriptorDB") -> None:
        if self.kind != other.kind or self.dims != other.dims:
            raise ContractViolation(
                f"incompatible descriptor databases: {self.kind}{self.dims} vs {other.kind}{other.dims}"
            )

    def save(self, path, binary: bool | None = None) -> None:
        path = Path(path)
        binary = path.suffix == ".npz" if binary is None else binary
        if binary:
            with open(path, "wb") as fh:
                np.savez(fh, ids=self.ids, payload=self.payload,
                         header=np.array(json.dumps(self._header())))
            return
        h = self._header()
        lines = [f"# kind={h['kind']} dims={'x'.join(map(str, h['dims']))} name={h['name']} config={h['config_hash']}"]
        flat = self.payload.reshape(len(self), -1)
        for i, row in zip(self.ids.tolist(), flat.tolist()):
            lines.append(",".join([str(i)] + [repr(v) for v in row]))
        path.write_text("\n".join(lines) + "\n")

    def _header(self):
        return {"kind": self.kind, "dims": list(self.dims), "name": self.name, "config_hash": self.config_hash}

    @classmethod
    def load(cls, path) -> "DescriptorDB":
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path) as z:
                h = json.loads(str(z["header"]))
                return cls(h["name"], h["kind"], z["ids"], z["payload"], h["config_hash"])
        text = path.read_text().splitlines()
        h = dict(tok.split("=", 1) for tok in text[0].lstrip("#").split())
        dims = tuple(int(x) for x in h["dims"].split("x") if x)
        conv = float if h["kind"] == "vector" else int
        ids, rows = [], []
        for line in text[1:]:
            if not line.strip():
                continue
            parts = line.split(",")
            ids.append(int(parts[0]))
            rows.append([conv(v) for v in parts[1:]])
        payload = np.array(rows, dtype=float if conv is float else np.int64).reshape((len(ids),) + dims)
        return cls(h["name"], h["kind"], ids, payload, h["config"])


class Extractor:
    """Computes one descriptor per object of a map from its constellation."""

    name = "base"
    kind = "vector"

    def __init__(self, graph_cfg: GraphConfig, cfg: hc.HandcraftedConfig = hc.HandcraftedConfig(), seed: int = 0):
        self.graph_cfg = graph_cfg
        self.cfg = cfg
        self.seed = seed

    def describe_constellation(self, c) -> Descriptor:
        raise NotImplementedError

    def describe(self, m: ObjectMap) -> DescriptorDB:
        if len(m) == 0:
            return self._db(m.ids, np.zeros((0,) + self._empty_dims(m)))
        cs = extract_all_constellations(m, self.graph_cfg.visual_range)
        payload = np.stack([self.describe_constellation(c).payload for c in cs])
        return self._db(m.ids, payload)

    def _empty_dims(self, m):
        return (0,)

    def _db(self, ids, payload) -> DescriptorDB:
        return DescriptorDB(self.name, self.kind, ids, payload, config_hash(self.graph_cfg, self.cfg, self.seed))


class OnionExtractor(Extractor):
    name = "onion"

    def describe_constellation(self, c):
        return hc.onion(c, self.cfg)


class OnionHistExtractor(Extractor):
    name = "onion_hist"

    def describe_constellation(self, c):
        return hc.onion_hist(c, self.cfg)


class RandomWalkExtractor(Extractor):
    name = "random_walk"
    kind = "walk_matrix"

    def describe(self, m: ObjectMap) -> DescriptorDB:
        # one stream per map, consumed in row order; instance ids are not trusted
        # to agree between a query map and the global map
        self._rng = np.random.default_rng(self.seed)
        return super().describe(m)

    def _empty_dims(self, m):
        return (self.cfg.n_walks, self.cfg.walk_length)

    def describe_constellation(self, c):
        rng = getattr(self, "_rng", None) or np.random.default_rng(self.seed)
        return hc.random_walk(build_graph(c, self.graph_cfg), self.cfg, seed=rng)


class _WholeMapExtractor(Extractor):
    """Local maps get one descriptor for the whole map, copied to each object;
    global maps get one per object over its constellation."""

    def describe(self, m: ObjectMap) -> DescriptorDB:
        if m.frame_tag == "local" and len(m):
            d = self.describe_whole(m).payload
            return self._db(m.ids, np.tile(d, (len(m), 1)))
        return super().describe(m)


class GosVertexExtractor(_WholeMapExtractor):
    name = "gos_vertex"

    def describe_whole(self, m):
        return hc.gos_vertex(m)

    def describe_constellation(self, c):
        return hc.gos_vertex(c)


class GosGraphExtractor(_WholeMapExtractor):
    name = "gos_graph"

    def describe_whole(self, m):
        return hc.gos_graph(map_graph(m, self.graph_cfg), self.cfg)

    def describe_constellation(self, c):
        return hc.gos_graph(build_graph(c, self.graph_cfg), self.cfg)


_REGISTRY = {
    "onion": OnionExtractor,
    "onion_hist": OnionHistExtractor,
    "random_walk": RandomWalkExtractor,
    "gos_graph": GosGraphExtractor,
    "gos_vertex": GosVertexExtractor,
}


def make_extractor(name: str, graph_cfg: GraphConfig, cfg: hc.HandcraftedConfig = hc.HandcraftedConfig(),
                   seed: int = 0, model=None) -> Extractor:
    """Build an extractor by name; ``gnn`` needs a trained ``model``."""
    if name == "gnn":
        if model is None:
            raise ContractViolation("the gnn extractor needs a model checkpoint")
        from .gnn.model import GnnExtractor

        return GnnExtractor(model, graph_cfg)
    if name not in _REGISTRY:
        raise ContractViolation(f"unknown extractor {name!r}; valid names: {', '.join(EXTRACTOR_NAMES)}")
    return _REGISTRY[name](graph_cfg, cfg, seed)
