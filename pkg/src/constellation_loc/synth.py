"""Procedural training worlds, noise models, and anchor/positive datasets."""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import Constellation, ContractViolation, ObjectMap, read_map, write_map
from .graph import extract_all_constellations

NOISE_KINDS = ("Trans", "Orient", "Dropout", "FP", "Misclass", "Crop", "Scale")
PATTERN_KINDS = ("line", "circle", "gaussian")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class WorldGenConfig:
    """Pattern counts/sizes are inclusive integer ranges; offsets are meters.

    ``offset_range_y`` lets worlds be elongated along x (street-like); when
    None the x range is reused for y. ``stratify_x`` draws each pattern's x
    offset from its own equal-width strip of the range, which avoids empty
    stretches along a long street.
    """

    n_patterns: tuple[int, int] = (3, 8)
    nodes_per_pattern: tuple[int, int] = (4, 15)
    n_classes: int = 20
    pattern_kinds: tuple[str, ...] = PATTERN_KINDS
    pattern_offset_range: tuple[float, float] = (-50.0, 50.0)
    offset_range_y: tuple[float, float] | None = None
    circle_radius: tuple[float, float] = (2.0, 15.0)
    gaussian_sigma: tuple[float, float] = (1.0, 8.0)
    line_length: tuple[float, float] = (10.0, 60.0)
    height_range: tuple[float, float] = (0.0, 3.0)
    stratify_x: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_patterns", "nodes_per_pattern"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ContractViolation(f"{name} must be a non-empty range of positive integers")
        if self.n_classes < 2:
            raise ContractViolation("n_classes must be >= 2")
        bad = set(self.pattern_kinds) - set(PATTERN_KINDS)
        if bad or not self.pattern_kinds:
            raise ContractViolation(f"pattern_kinds must be a non-empty subset of {PATTERN_KINDS}")


def _pattern_points(kind: str, n: int, cfg: WorldGenConfig, rng: np.random.Generator) -> np.ndarray:
    if kind == "line":
        length = rng.uniform(*cfg.line_length)
        heading = rng.uniform(-math.pi, math.pi)
        pitch = rng.uniform(-0.05, 0.05)
        direction = np.array(
            [math.cos(pitch) * math.cos(heading), math.cos(pitch) * math.sin(heading), math.sin(pitch)]
        )
        t = np.linspace(-length / 2, length / 2, n)
        return t[:, None] * direction
    if kind == "circle":
        r = rng.uniform(*cfg.circle_radius)
        phase = rng.uniform(0, 2 * math.pi)
        a = phase + 2 * math.pi * np.arange(n) / n
        return np.stack([r * np.cos(a), r * np.sin(a), np.zeros(n)], axis=1)
    sx, sy = rng.uniform(*cfg.gaussian_sigma, size=2)
    rho = rng.uniform(-0.8, 0.8)
    cov = np.array([[sx * sx, rho * sx * sy, 0.0], [rho * sx * sy, sy * sy, 0.0], [0.0, 0.0, 0.25]])
    return rng.multivariate_normal(np.zeros(3), cov, size=n)


def generate_world(cfg: WorldGenConfig) -> ObjectMap:
    """Superimpose randomly sampled line/circle/Gaussian patterns of labeled objects."""
    rng = np.random.default_rng(cfg.seed)
    yr = cfg.offset_range_y or cfg.pattern_offset_range
    chunks = []
    n_patterns = int(rng.integers(cfg.n_patterns[0], cfg.n_patterns[1] + 1))
    lo, hi = cfg.pattern_offset_range
    for k in range(n_patterns):
        kind = cfg.pattern_kinds[int(rng.integers(len(cfg.pattern_kinds)))]
        n = int(rng.integers(cfg.nodes_per_pattern[0], cfg.nodes_per_pattern[1] + 1))
        if cfg.stratify_x:
            width = (hi - lo) / n_patterns
            x = rng.uniform(lo + k * width, lo + (k + 1) * width)
        else:
            x = rng.uniform(lo, hi)
        offset = np.array([x, rng.uniform(*yr), rng.uniform(*cfg.height_range)])
        chunks.append(_pattern_points(kind, n, cfg, rng) + offset)
    pos = np.concatenate(chunks)
    labels = rng.integers(0, cfg.n_classes, size=len(pos))
    return ObjectMap(np.arange(len(pos)), labels, pos, cfg.n_classes)


@dataclass(frozen=True)
class NoiseConfig:
    """Noise magnitudes for augmentation and test scenarios.

    Translational noise is Gaussian with std ``e_trans_sigma`` unless
    ``e_trans_uniform`` is set, in which case its magnitude is uniform in that
    interval with a random sign. ``orient_range`` is in degrees.
    ``apply_prob`` is the chance that each non-Orient noise is applied when
    sampling a positive (Orient is always applied); it is a guess.
    """

    e_trans_sigma: float = 0.5
    e_trans_uniform: tuple[float, float] | None = None
    orient_range: tuple[float, float] = (-180.0, 180.0)
    e_dropout: float = 0.1
    e_fp: float = 0.1
    alpha_misclass: float = 0.1
    e_crop_max: float = 0.3
    scale_range: tuple[float, float] = (0.85, 1.25)
    apply_prob: float = 0.5

    def __post_init__(self):
        for name in ("e_dropout", "e_fp", "alpha_misclass", "apply_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name} must be a probability")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ContractViolation("scale_range must be a positive interval")
        if self.e_trans_sigma < 0:
            raise ContractViolation("e_trans_sigma must be >= 0")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        """No noise except a full-circle Orient rotation."""
        return cls(
            e_trans_sigma=0.0, e_dropout=0.0, e_fp=0.0, alpha_misclass=0.0, e_crop_max=0.0,
            scale_range=(1.0, 1.0),
        )


# --- noise primitives on origin-relative point sets -------------------------


def perturb_positions(positions: np.ndarray, e: np.ndarray) -> np.ndarray:
    """``p + |p| * e`` with ``e`` broadcast per object and axis."""
    p = np.asarray(positions, dtype=float)
    return p + np.linalg.norm(p, axis=1, keepdims=True) * e


def rotate_positions(positions: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    out = np.array(positions, dtype=float)
    out[:, :2] = out[:, :2] @ np.array([[c, -s], [s, c]]).T
    return out


def misclass_probability(positions: np.ndarray, alpha: float) -> np.ndarray:
    r = np.linalg.norm(positions, axis=1)
    rmax = r.max() if len(r) else 0.0
    if rmax == 0.0:
        return np.zeros(len(r))
    return r / rmax * alpha


def crop_mask(positions: np.ndarray, axis: int, e_crop: float) -> np.ndarray:
    """True for objects kept: those not beyond ``max|p| * (1 - e_crop)`` on ``axis``."""
    r = np.linalg.norm(positions, axis=1)
    rmax = r.max() if len(r) else 0.0
    return ~(positions[:, axis] > rmax * (1.0 - e_crop))


def _sample_trans(n: int, cfg: NoiseConfig, rng) -> np.ndarray:
    if cfg.e_trans_uniform is not None:
        mag = rng.uniform(*cfg.e_trans_uniform, size=(n, 3))
        return mag * rng.choice([-1.0, 1.0], size=(n, 3))
    return rng.normal(0.0, cfg.e_trans_sigma, size=(n, 3))


def _noise_arrays(kind, ids, labels, pos, protected, n_classes, cfg: NoiseConfig, rng):
    """Apply one noise kind to parallel arrays; returns new (ids, labels, pos, protected)."""
    if kind == "Trans":
        return ids, labels, perturb_positions(pos, _sample_trans(len(pos), cfg, rng)), protected
    if kind == "Orient":
        yaw = math.radians(rng.uniform(*cfg.orient_range))
        return ids, labels, rotate_positions(pos, yaw), protected
    if kind == "Scale":
        return ids, labels, pos * rng.uniform(*cfg.scale_range), protected
    if kind == "Dropout":
        keep = (rng.random(len(pos)) >= cfg.e_dropout) | protected
        return ids[keep], labels[keep], pos[keep], protected[keep]
    if kind == "Misclass":
        flip = rng.random(len(pos)) < misclass_probability(pos, cfg.alpha_misclass)
        labels = labels.copy()
        # shift by 1..n_classes-1 so the label always changes
        shift = rng.integers(1, n_classes, size=len(pos)) if n_classes > 1 else np.zeros(len(pos), int)
        labels[flip] = (labels[flip] + shift[flip]) % n_classes
        return ids, labels, pos, protected
    if kind == "Crop":
        axis = int(rng.integers(2))
        keep = crop_mask(pos, axis, rng.uniform(0.0, cfg.e_crop_max)) | protected
        return ids[keep], labels[keep], pos[keep], protected[keep]
    if kind == "FP":
        if rng.random() >= cfg.e_fp:
            return ids, labels, pos, protected
        radius = float(np.linalg.norm(pos, axis=1).max()) if len(pos) else 0.0
        radius = radius if radius > 0 else 1.0
        # uniform in the ball: direction from a normal draw, radius ~ R * U^(1/3)
        v = rng.normal(size=3)
        v *= radius * rng.random() ** (1 / 3) / np.linalg.norm(v)
        new_id = int(ids.max()) + 1 if len(ids) else 0
        return (
            np.append(ids, new_id),
            np.append(labels, int(rng.integers(n_classes))),
            np.vstack([pos, v]),
            np.append(protected, False),
        )
    raise ContractViolation(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")


def apply_noise(c: Constellation, kind: str, cfg: NoiseConfig, rng_seed=None) -> Constellation:
    """Apply one augmentation to a constellation; the center is never removed."""
    rng = _rng(rng_seed)
    protected = np.zeros(len(c), dtype=bool)
    protected[c.center_index] = True
    ids, labels, pos, protected = _noise_arrays(
        kind, c.ids, c.labels, c.positions, protected, c.n_classes, cfg, rng
    )
    order = np.argsort(ids, kind="stable")
    center = int(np.flatnonzero(ids[order] == c.center_id)[0])
    return Constellation(ids[order], labels[order], pos[order], center, c.origin, c.n_classes)


def apply_noise_map(m: ObjectMap, kind: str, cfg: NoiseConfig, rng_seed=None) -> ObjectMap:
    """Apply one noise kind to a local map, relative to its frame origin."""
    rng = _rng(rng_seed)
    ids, labels, pos, _ = _noise_arrays(
        kind, m.ids, m.labels, m.positions, np.zeros(len(m), dtype=bool), m.n_classes, cfg, rng
    )
    return ObjectMap(ids, labels, pos, m.n_classes, m.frame_tag)


# order in which sampled noise kinds are applied; Orient goes last
_APPLY_ORDER = ("Crop", "Dropout", "FP", "Misclass", "Trans", "Scale", "Orient")


def sample_noise_kinds(cfg: NoiseConfig, rng) -> tuple[str, ...]:
    rng = _rng(rng)
    picked = [k for k in _APPLY_ORDER if k != "Orient" and rng.random() < cfg.apply_prob]
    return tuple(picked) + ("Orient",)


def augment(c: Constellation, kinds, cfg: NoiseConfig, seed) -> Constellation:
    """Apply ``kinds`` in canonical order with one seeded stream."""
    rng = _rng(seed)
    for kind in sorted(kinds, key=_APPLY_ORDER.index):
        c = apply_noise(c, kind, cfg, rng)
    return c


# --- triplet datasets ------------------------------------------------------


@dataclass(frozen=True)
class VariantRecord:
    anchor_id: int
    variant_id: int
    noise_kinds: tuple[str, ...]
    seed: int


@dataclass(eq=False)
class TripletDataset:
    """Anchors with their positives; ``labels[i]`` is the anchor index of sample i.

    ``samples`` holds anchors and positives flattened, each anchor first.
    """

    anchors: list[Constellation]
    positives: list[list[Constellation]]
    records: list[VariantRecord] = field(default_factory=list)
    train_anchors: np.ndarray | None = None
    val_anchors: np.ndarray | None = None

    @property
    def samples(self) -> list[Constellation]:
        out = []
        for a, pos in zip(self.anchors, self.positives):
            out.append(a)
            out.extend(pos)
        return out

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate(
            [np.full(1 + len(p), i, dtype=np.int64) for i, p in enumerate(self.positives)]
        ) if self.anchors else np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.anchors)


def make_triplet_dataset(
    m: ObjectMap,
    cfg: NoiseConfig,
    n_positives: int = 9,
    seed: int = 0,
    n_anchors: int | None = None,
    visual_range: float = 30.0,
    val_fraction: float = 0.2,
    min_members: int = 1,
) -> TripletDataset:
    """Anchors are constellations around sampled objects; positives are augmented copies."""
    if len(m) == 0:
        raise ContractViolation("map is empty")
    rng = np.random.default_rng(seed)
    all_c = extract_all_constellations(m, visual_range)
    eligible = np.array([i for i, c in enumerate(all_c) if len(c) >= min_members], dtype=np.int64)
    if n_anchors is None or n_anchors >= len(eligible):
        rows = eligible
    else:
        rows = np.sort(rng.choice(eligible, size=n_anchors, replace=False))
    anchors, positives, records = [], [], []
    for a_idx, row in enumerate(rows):
        anchor = all_c[row]
        anchors.append(anchor)
        records.append(VariantRecord(anchor.center_id, 0, (), 0))
        pos = []
        for v in range(1, n_positives + 1):
            kinds = sample_noise_kinds(cfg, rng)
            s = int(rng.integers(2**62))
            pos.append(augment(anchor, kinds, cfg, s))
            records.append(VariantRecord(anchor.center_id, v, kinds, s))
        positives.append(pos)
    perm = rng.permutation(len(anchors))
    n_val = int(round(len(anchors) * val_fraction)) if len(anchors) > 1 else 0
    return TripletDataset(
        anchors, positives, records, train_anchors=np.sort(perm[n_val:]), val_anchors=np.sort(perm[:n_val])
    )


def merge_datasets(parts: list[TripletDataset]) -> TripletDataset:
    """Concatenate datasets (e.g. from several worlds), keeping each part's split."""
    anchors, positives, records, tr, va = [], [], [], [], []
    for ds in parts:
        off = len(anchors)
        anchors += ds.anchors
        positives += ds.positives
        records += ds.records
        tr.append(ds.train_anchors + off)
        va.append(ds.val_anchors + off)
    return TripletDataset(anchors, positives, records, np.concatenate(tr), np.concatenate(va))


# --- dataset serialization -------------------------------------------------

_TUPLE_FIELDS = {
    "n_patterns", "nodes_per_pattern", "pattern_kinds", "pattern_offset_range", "offset_range_y",
    "circle_radius", "gaussian_sigma", "line_length", "height_range", "e_trans_uniform",
    "orient_range", "scale_range", "head_dims",
}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_to_dict(cfg) -> dict[str, str]:
    return {k: _fmt(v) for k, v in asdict(cfg).items()}


def config_from_dict(cls, values: dict[str, str], section: str = ""):
    """Build a dataclass config from string values; unknown keys raise KeyError naming the key."""
    kinds = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in kinds:
            where = f"[{section}] " if section else ""
            raise KeyError(f"unknown config key {where}{key!r}; valid keys: {', '.join(sorted(kinds))}")
        default = kinds[key].default
        raw = raw.strip()
        if raw.lower() == "none":
            kwargs[key] = None
        elif key in _TUPLE_FIELDS:
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if key == "pattern_kinds":
                kwargs[key] = tuple(items)
            elif key in ("n_patterns", "nodes_per_pattern", "head_dims"):
                kwargs[key] = tuple(int(x) for x in items)
            else:
                kwargs[key] = tuple(float(x) for x in items)
        elif isinstance(default, bool):
            kwargs[key] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            kwargs[key] = int(raw)
        elif isinstance(default, float):
            kwargs[key] = float(raw)
        else:
            # str-or-number fields such as edge_threshold ("auto" or meters)
            try:
                kwargs[key] = float(raw)
            except ValueError:
                kwargs[key] = raw
    return cls(**kwargs)


def save_dataset(directory, world: ObjectMap, ds: TripletDataset, noise: NoiseConfig, meta: dict) -> None:
    """Write the map, a regeneration index, and the noise/sampling settings."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_map(d / "map.txt", world, extra_header=["manifest=manifest.json"])
    lines = ["anchor_id,variant_id,noise_kinds,seed"]
    lines += [f"{r.anchor_id},{r.variant_id},{'+'.join(r.noise_kinds)},{r.seed}" for r in ds.records]
    (d / "index.csv").write_text("\n".join(lines) + "\n")
    cp = configparser.ConfigParser()
    cp["noise"] = config_to_dict(noise)
    cp["dataset"] = {k: _fmt(v) for k, v in meta.items()}
    cp["split"] = {
        "train": _fmt([int(i) for i in ds.train_anchors]),
        "val": _fmt([int(i) for i in ds.val_anchors]),
    }
    with open(d / "dataset.cfg", "w") as fh:
        cp.write(fh)


def load_dataset(directory) -> tuple[ObjectMap, TripletDataset]:
    """Rebuild a saved dataset exactly from its map and regeneration index."""
    d = Path(directory)
    if not (d / "index.csv").exists():
        raise FileNotFoundError(f"no dataset at {d} (index.csv missing)")
    world = read_map(d / "map.txt")
    cp = configparser.ConfigParser()
    cp.read(d / "dataset.cfg")
    noise = config_from_dict(NoiseConfig, dict(cp["noise"]), "noise")
    visual_range = float(cp["dataset"].get("visual_range", "30.0"))
    by_id = {c.center_id: c for c in extract_all_constellations(world, visual_range)}
    anchors, positives, records = [], [], []
    for line in (d / "index.csv").read_text().splitlines()[1:]:
        if not line.strip():
            continue
        a_id, v_id, kinds, seed = line.split(",")
        rec = VariantRecord(int(a_id), int(v_id), tuple(k for k in kinds.split("+") if k), int(seed))
        records.append(rec)
        if rec.variant_id == 0:
            anchors.append(by_id[rec.anchor_id])
            positives.append([])
        else:
            positives[-1].append(augment(anchors[-1], rec.noise_kinds, noise, rec.seed))

    def _ints(s):
        return np.array([int(x) for x in s.split(",") if x.strip()], dtype=np.int64)

    ds = TripletDataset(anchors, positives, records, _ints(cp["split"]["train"]), _ints(cp["split"]["val"]))
    return world, ds
