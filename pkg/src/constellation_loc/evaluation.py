"""Point-cloud ingestion, query sampling, test scenarios, success rate and benchmarks."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import DegenerateInput, ObjectMap, PoseSE2z, normalize_yaw
from .extractors import Extractor
from .localizer import LocalizationResult, MatchConfig, localize
from .synth import NoiseConfig, apply_noise_map

SCENARIOS = ("SelfLocalization", "FewerObjects", "AddedNoise")
SCENARIO_TITLES = {
    "SelfLocalization": "Self-localization",
    "FewerObjects": "Fewer Objects",
    "AddedNoise": "Added Noise",
}
ADDED_NOISE = NoiseConfig(
    e_trans_sigma=0.0, e_trans_uniform=(0.0, 0.1), e_dropout=0.1, alpha_misclass=0.2,
    scale_range=(0.9, 1.1), e_fp=0.0, e_crop_max=0.0,
)
ADDED_NOISE_KINDS = ("Dropout", "Misclass", "Trans", "Scale")


# --- ingestion ---------------------------------------------------------------


@dataclass(frozen=True)
class IngestConfig:
    """``label_remap``: ``"dense"`` (sorted surviving labels -> 0..k-1),
    ``"identity"``, or an explicit mapping of raw -> dense labels."""

    voxel_size: float = 0.1
    removed_classes: frozenset[int] = frozenset()
    label_remap: str | dict = "dense"
    n_classes: int | None = None

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be > 0")
        object.__setattr__(self, "removed_classes", frozenset(int(c) for c in self.removed_classes))


def read_pointcloud(path) -> np.ndarray:
    """Rows of ``x y z instance_id class_id`` (whitespace separated, '#' comments)."""
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.size and data.shape[1] != 5:
        raise ValueError(f"{path}: expected 5 columns, got {data.shape[1]}")
    return data.reshape(-1, 5)


def ingest_pointcloud(points, cfg: IngestConfig = IngestConfig()) -> ObjectMap:
    """Voxel-downsample per instance, then average voxel representatives into centroids.

    Each occupied (instance, voxel) cell contributes the mean of its points.
    An instance's class is the most frequent class among its points.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 5)
    inst = pts[:, 3].astype(np.int64)
    cls = pts[:, 4].astype(np.int64)
    keep = ~np.isin(cls, list(cfg.removed_classes))
    pts, inst, cls = pts[keep], inst[keep], cls[keep]
    if len(pts) == 0:
        raise DegenerateInput("no points left after class filtering")
    vox = np.floor(pts[:, :3] / cfg.voxel_size).astype(np.int64)
    _, cell = np.unique(np.column_stack([inst, vox]), axis=0, return_inverse=True)
    cell = cell.reshape(-1)
    n_cells = cell.max() + 1
    counts = np.bincount(cell, minlength=n_cells).astype(float)
    reps = np.stack([np.bincount(cell, pts[:, k], n_cells) for k in range(3)], axis=1) / counts[:, None]
    cell_inst = np.zeros(n_cells, dtype=np.int64)
    cell_inst[cell] = inst
    ids, inst_of_cell = np.unique(cell_inst, return_inverse=True)
    n_vox = np.bincount(inst_of_cell).astype(float)
    centroids = np.stack([np.bincount(inst_of_cell, reps[:, k]) for k in range(3)], axis=1) / n_vox[:, None]
    raw = np.array([np.bincount(cls[inst == i]).argmax() for i in ids], dtype=np.int64)
    if cfg.label_remap == "identity":
        labels = raw
        n_classes = cfg.n_classes or int(raw.max()) + 1
    elif cfg.label_remap == "dense":
        uniq = np.unique(raw)
        labels = np.searchsorted(uniq, raw)
        n_classes = cfg.n_classes or len(uniq)
    else:
        remap = {int(k): int(v) for k, v in dict(cfg.label_remap).items()}
        labels = np.array([remap[int(c)] for c in raw], dtype=np.int64)
        n_classes = cfg.n_classes or max(remap.values()) + 1
    return ObjectMap(ids, labels, centroids, n_classes)


def map_as_points(m: ObjectMap) -> np.ndarray:
    """One point per object, so an ingested map can be re-ingested."""
    return np.column_stack([m.positions, m.ids, m.labels])


# --- queries -------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    """One testing scenario. ``visual_range`` None picks 30 m (20 m for FewerObjects)."""

    scenario: str = "SelfLocalization"
    visual_range: float | None = None
    noise: NoiseConfig = ADDED_NOISE
    n_queries: int = 500
    n_runs: int = 5
    seed: int = 0
    waypoints: tuple[tuple[float, float], ...] | None = None
    occlusion_deg: float | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")

    @property
    def range(self) -> float:
        if self.visual_range is not None:
            return float(self.visual_range)
        return 20.0 if self.scenario == "FewerObjects" else 30.0


@dataclass(frozen=True, eq=False)
class Query:
    position: np.ndarray
    qlsm: ObjectMap
    truth: PoseSE2z


def default_waypoints(m: ObjectMap) -> np.ndarray:
    """Straight path along the longer bounding-box axis, through the middle, 5% inset."""
    lo, hi = m.positions[:, :2].min(0), m.positions[:, :2].max(0)
    mid = (lo + hi) / 2
    axis = int(np.argmax(hi - lo))
    a, b = mid.copy(), mid.copy()
    inset = 0.05 * (hi[axis] - lo[axis])
    a[axis], b[axis] = lo[axis] + inset, hi[axis] - inset
    return np.array([a, b])


def point_on_path(waypoints: np.ndarray, s: float) -> np.ndarray:
    """Point at arc-length fraction ``s`` in [0, 1] of a polyline."""
    seg = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    total = seg.sum()
    if total == 0:
        return waypoints[0].astype(float)
    dist = s * total
    k = min(int(np.searchsorted(np.cumsum(seg), dist)), len(seg) - 1)
    start = np.concatenate([[0.0], np.cumsum(seg)])[k]
    f = (dist - start) / seg[k] if seg[k] > 0 else 0.0
    return waypoints[k] + f * (waypoints[k + 1] - waypoints[k])


def occluded(rel_xy: np.ndarray, half_angle_deg: float) -> np.ndarray:
    """Objects hidden by a nearer object within a bearing cone of the given half-angle."""
    r = np.linalg.norm(rel_xy, axis=1)
    bearing = np.arctan2(rel_xy[:, 1], rel_xy[:, 0])
    diff = np.abs(np.angle(np.exp(1j * (bearing[:, None] - bearing[None, :]))))
    nearer = r[None, :] < r[:, None]
    return ((diff <= math.radians(half_angle_deg)) & nearer).any(1)


def make_qlsm(m: ObjectMap, position, yaw: float, visual_range: float, occlusion_deg=None) -> tuple[ObjectMap, PoseSE2z]:
    """Objects within planar range of ``position``, expressed in a frame rotated by ``yaw``.

    The returned pose maps local coordinates back to global ones.
    """
    pos2 = np.asarray(position, dtype=float)[:2]
    rel = m.positions[:, :2] - pos2
    vis = np.linalg.norm(rel, axis=1) <= visual_range
    if occlusion_deg is not None and vis.any():
        idx = np.flatnonzero(vis)
        vis[idx[occluded(rel[idx], occlusion_deg)]] = False
    truth = PoseSE2z(pos2[0], pos2[1], yaw)
    local = truth.inverse().apply(m.positions[vis]) if vis.any() else np.zeros((0, 3))
    sub = m.subset(vis)
    return ObjectMap(sub.ids, sub.labels, local, m.n_classes, "local"), truth


def sample_queries(m: ObjectMap, cfg: ScenarioConfig, seed: int | None = None) -> list[Query]:
    """Sample query poses along the trajectory and build their local maps.

    Position and yaw come from a per-query stream that does not depend on the
    scenario, so different scenarios see the same poses under one seed.
    """
    if len(m) == 0:
        raise DegenerateInput("map is empty")
    seed = cfg.seed if seed is None else seed
    waypoints = np.asarray(cfg.waypoints, dtype=float) if cfg.waypoints else default_waypoints(m)
    children = np.random.SeedSequence(seed).spawn(cfg.n_queries)
    out = []
    for child in children:
        pose_rng, noise_rng = (np.random.default_rng(s) for s in child.spawn(2))
        position = point_on_path(waypoints, pose_rng.random())
        yaw = normalize_yaw(pose_rng.uniform(-math.pi, math.pi))
        qlsm, truth = make_qlsm(m, position, yaw, cfg.range, cfg.occlusion_deg)
        if cfg.scenario == "AddedNoise":
            for kind in ADDED_NOISE_KINDS:
                qlsm = apply_noise_map(qlsm, kind, cfg.noise, noise_rng)
        out.append(Query(position, qlsm, truth))
    return out


# --- metrics -------------------------------------------------------------------


def success_rate(results: Sequence[LocalizationResult], threshold: float = 1.0) -> float:
    """Percentage of queries localized with planar translation error below ``threshold``."""
    if len(results) == 0:
        raise DegenerateInput("no results")
    ok = sum(1 for r in results if r.success and r.translation_error < threshold)
    return 100.0 * ok / len(results)


RESULT_FIELDS = ("query_id", "success", "x", "y", "yaw_deg", "trans_err_m", "n_inliers", "t_compute_s", "t_match_s")


def result_row(query_id: int, r: LocalizationResult) -> list:
    return [
        query_id, int(r.success), repr(r.pose.x), repr(r.pose.y), repr(math.degrees(r.pose.yaw)),
        repr(r.translation_error), r.n_inliers, repr(r.t_compute), repr(r.t_match),
    ]


def write_results(path, results: Sequence[LocalizationResult], extra_cols: dict | None = None) -> None:
    extra_cols = extra_cols or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(extra_cols) + list(RESULT_FIELDS))
        for i, r in enumerate(results):
            w.writerow(list(extra_cols.values()) + result_row(i, r))


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_queries(global_map: ObjectMap, queries: Sequence[Query], extractor: Extractor, match: MatchConfig,
                global_db=None) -> list[LocalizationResult]:
    if global_db is None:
        global_db = extractor.describe(global_map)
    out = []
    for i, q in enumerate(queries):
        cfg = replace(match, seed=match.seed + i)
        if len(q.qlsm) == 0:
            out.append(LocalizationResult(PoseSE2z(), [], False, translation_error=math.inf))
            continue
        out.append(localize(q.qlsm, global_map, extractor, cfg, global_db=global_db, truth=q.truth))
    return out


# --- benchmark -----------------------------------------------------------------


@dataclass
class BenchmarkRow:
    extractor: str
    scenario: str
    eta_runs: list[float]
    t_compute: float
    t_match: float

    @property
    def eta_mean(self) -> float:
        return float(np.mean(self.eta_runs))

    @property
    def eta_std(self) -> float:
        # population std over run-level values; 0 for a single run
        return float(np.std(self.eta_runs))

    @property
    def t_total(self) -> float:
        return self.t_compute + self.t_match


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow] = field(default_factory=list)
    per_query: list[tuple[str, str, int, list[LocalizationResult]]] = field(default_factory=list)
    failures: list[tuple[str, str, int, str]] = field(default_factory=list)

    def row(self, extractor: str, scenario: str) -> BenchmarkRow:
        for r in self.rows:
            if r.extractor == extractor and r.scenario == scenario:
                return r
        raise KeyError((extractor, scenario))


def run_benchmark(global_map: ObjectMap, extractors: Sequence[Extractor], scenarios: Sequence[ScenarioConfig],
                  match: MatchConfig = MatchConfig(), progress=None) -> BenchmarkReport:
    """Mean/std of the success rate over runs, plus mean per-query timings.

    Run r re-samples queries with seed ``scenario.seed + r`` and offsets the
    RANSAC seeds, so the spread covers both sources of randomness.
    Sub-run exceptions are recorded in ``report.failures``.
    """
    report = BenchmarkReport()
    dbs, broken = {}, {}
    for ex in extractors:
        try:
            dbs[ex.name] = ex.describe(global_map)
        except Exception as exc:
            broken[ex.name] = repr(exc)
    for sc in scenarios:
        query_sets = [sample_queries(global_map, sc, seed=sc.seed + r) for r in range(sc.n_runs)]
        for ex in extractors:
            etas, tc, tm = [], [], []
            for r, queries in enumerate(query_sets):
                if ex.name in broken:
                    report.failures.append((ex.name, sc.scenario, r, broken[ex.name]))
                    continue
                try:
                    res = run_queries(global_map, queries, ex, replace(match, seed=match.seed + 100003 * r),
                                      global_db=dbs[ex.name])
                except Exception as exc:  # recorded, reported, and turned into a nonzero exit by the CLI
                    report.failures.append((ex.name, sc.scenario, r, repr(exc)))
                    continue
                etas.append(success_rate(res))
                tc.append(np.mean([x.t_compute for x in res]))
                tm.append(np.mean([x.t_match for x in res]))
                report.per_query.append((ex.name, sc.scenario, r, res))
                if progress:
                    progress(ex.name, sc.scenario, r, etas[-1])
            if etas:
                report.rows.append(BenchmarkRow(ex.name, sc.scenario, etas, float(np.mean(tc)), float(np.mean(tm))))
    return report


REPORT_FIELDS = ("extractor", "scenario", "eta_mean", "eta_std", "n_runs", "t_compute_s", "t_match_s", "t_total_s")


def write_report_csv(path, report: BenchmarkReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in report.rows:
            w.writerow([r.extractor, r.scenario, f"{r.eta_mean:.2f}", f"{r.eta_std:.2f}", len(r.eta_runs),
                        f"{r.t_compute:.6f}", f"{r.t_match:.6f}", f"{r.t_total:.6f}"])


def write_per_query_csv(path, report: BenchmarkReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("extractor", "scenario", "run") + RESULT_FIELDS)
        for name, sc, run, res in report.per_query:
            for i, r in enumerate(res):
                w.writerow([name, sc, run] + result_row(i, r))


def format_table(report: BenchmarkReport) -> str:
    """Aligned text: success-rate table (descriptor rows x scenario columns), then timings."""
    extractors = list(dict.fromkeys(r.extractor for r in report.rows))
    scenarios = [s for s in SCENARIOS if any(r.scenario == s for r in report.rows)]
    cells = {(r.extractor, r.scenario): f"{r.eta_mean:.2f} ± {r.eta_std:.2f}" for r in report.rows}
    head = ["Descriptor"] + [SCENARIO_TITLES[s] for s in scenarios]
    body = [[e] + [cells.get((e, s), "-") for s in scenarios] for e in extractors]
    widths = [max(len(row[k]) for row in [head] + body) for k in range(len(head))]
    line = lambda row: " | ".join(c.ljust(w) for c, w in zip(row, widths))
    title = "Translation Success Rate (η) [%]"
    out = [title, line(head), "-+-".join("-" * w for w in widths)] + [line(r) for r in body]
    t_head = ["", *extractors]
    timing = {}
    for e in extractors:
        rs = [r for r in report.rows if r.extractor == e]
        timing[e] = (np.mean([r.t_compute for r in rs]), np.mean([r.t_match for r in rs]))
    t_body = [
        ["Compute"] + [f"{timing[e][0]:.4f}" for e in extractors],
        ["Match"] + [f"{timing[e][1]:.4f}" for e in extractors],
        ["Total"] + [f"{sum(timing[e]):.4f}" for e in extractors],
    ]
    tw = [max(len(r[k]) for r in [t_head] + t_body) for k in range(len(t_head))]
    tline = lambda row: " | ".join(c.ljust(w) for c, w in zip(row, tw))
    out += ["", "Mean time per query [s]", tline(t_head), "-+-".join("-" * w for w in tw)]
    out += [tline(r) for r in t_body]
    return "\n".join(out) + "\n"
