"""Descriptor matching and planar (x, y, yaw) RANSAC registration of a local map."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .core import ContractViolation, DegenerateInput, ObjectMap, PoseSE2z
from .extractors import DescriptorDB, Extractor


@dataclass(frozen=True)
class MatchConfig:
    K: int = 5
    t_ransac: int = 3
    inlier_radius: float = 1.0
    max_iterations: int = 2000
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ContractViolation("K must be >= 1")
        if self.t_ransac < 2:
            raise ContractViolation("t_ransac must be >= 2")
        if not self.inlier_radius > 0:
            raise ContractViolation("inlier_radius must be > 0")


@dataclass
class Correspondences:
    query_rows: np.ndarray
    global_rows: np.ndarray
    query_ids: np.ndarray
    global_ids: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.query_rows)


@dataclass
class LocalizationResult:
    pose: PoseSE2z
    inlier_pairs: list[tuple[int, int]]
    success: bool
    translation_error: float = math.nan
    n_correspondences: int = 0
    iterations: int = 0
    t_compute: float = 0.0
    t_match: float = 0.0

    @property
    def n_inliers(self) -> int:
        return len(self.inlier_pairs)


def walk_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise 1 - (multiset row intersection / n_rows) between walk matrices.

    ``a`` is (na, n_w, l_w) and ``b`` is (nb, n_w, l_w). min(ca, cb) of row
    counts is summed as the number of thresholds t with both counts >= t.
    """
    na, nb = len(a), len(b)
    n_w = a.shape[1]
    if na == 0 or nb == 0 or n_w == 0:
        return np.zeros((na, nb))
    rows = np.concatenate([a.reshape(-1, a.shape[2]), b.reshape(-1, b.shape[2])])
    _, code = np.unique(rows, axis=0, return_inverse=True)
    code = code.reshape(-1)
    owner = np.repeat(np.arange(na + nb), n_w)
    counts = sparse.coo_matrix((np.ones(len(code)), (owner, code)), shape=(na + nb, code.max() + 1)).tocsr()
    counts.sum_duplicates()
    inter = np.zeros((na, nb))
    for t in range(1, int(counts.data.max()) + 1):
        ge = counts.copy()
        ge.data = (ge.data >= t).astype(float)
        ge.eliminate_zeros()
        inter += (ge[:na] @ ge[na:].T).toarray()
    return 1.0 - inter / n_w


def descriptor_distance_matrix(q: DescriptorDB, g: DescriptorDB) -> np.ndarray:
    q.check_compatible(g)
    if q.kind == "vector":
        return cdist(q.payload, g.payload)
    return walk_distance_matrix(q.payload, g.payload)


def knn_candidates(query_db: DescriptorDB, global_db: DescriptorDB, K: int) -> Correspondences:
    """K nearest global descriptors per query descriptor; ties go to the lower instance id."""
    d = descriptor_distance_matrix(query_db, global_db)
    nq, ng = d.shape
    k = min(K, ng)
    if nq == 0 or k == 0:
        z = np.zeros(0, dtype=np.int64)
        return Correspondences(z, z, z, z, np.zeros(0))
    order = np.lexsort((np.broadcast_to(global_db.ids, d.shape), d), axis=-1)[:, :k]
    q_rows = np.repeat(np.arange(nq), k)
    g_rows = order.reshape(-1)
    return Correspondences(
        q_rows, g_rows, query_db.ids[q_rows], global_db.ids[g_rows], d[q_rows, g_rows]
    )


def solve_two_point(q: np.ndarray, g: np.ndarray) -> PoseSE2z:
    """Planar rigid transform mapping the 2 query points onto the 2 global points."""
    yaw, t = _two_point(q[None, 0, :2], q[None, 1, :2], g[None, 0, :2], g[None, 1, :2])
    return PoseSE2z(t[0, 0], t[0, 1], yaw[0])


def _two_point(q1, q2, g1, g2):
    dq, dg = q2 - q1, g2 - g1
    yaw = np.arctan2(dq[:, 0] * dg[:, 1] - dq[:, 1] * dg[:, 0], (dq * dg).sum(1))
    c, s = np.cos(yaw), np.sin(yaw)
    mq, mg = (q1 + q2) / 2, (g1 + g2) / 2
    t = mg - np.stack([c * mq[:, 0] - s * mq[:, 1], s * mq[:, 0] + c * mq[:, 1]], axis=1)
    return yaw, t


def fit_planar_rigid(q: np.ndarray, g: np.ndarray) -> PoseSE2z:
    """Least-squares planar rotation + translation (no scale) from q onto g."""
    q, g = np.asarray(q)[:, :2], np.asarray(g)[:, :2]
    mq, mg = q.mean(0), g.mean(0)
    qc, gc = q - mq, g - mg
    yaw = math.atan2(float(np.sum(qc[:, 0] * gc[:, 1] - qc[:, 1] * gc[:, 0])), float(np.sum(qc * gc)))
    c, s = math.cos(yaw), math.sin(yaw)
    t = mg - np.array([c * mq[0] - s * mq[1], s * mq[0] + c * mq[1]])
    return PoseSE2z(t[0], t[1], yaw)


def _residuals(pose: PoseSE2z, q, g) -> np.ndarray:
    return np.linalg.norm(pose.apply(q)[:, :2] - g[:, :2], axis=1)


def _one_to_one(idx, resid, q_ids, g_ids) -> np.ndarray:
    """Keep the lowest-residual pair per query id and per global id."""
    idx = idx[np.argsort(resid[idx], kind="stable")]
    seen_q, seen_g, keep = set(), set(), []
    for i in idx:
        if q_ids[i] in seen_q or g_ids[i] in seen_g:
            continue
        seen_q.add(q_ids[i])
        seen_g.add(g_ids[i])
        keep.append(i)
    return np.sort(np.array(keep, dtype=np.int64))


def ransac_align(query_pts, global_pts, cfg: MatchConfig = MatchConfig(), query_ids=None, global_ids=None,
                 chunk: int = 256) -> LocalizationResult:
    """Estimate the query->global planar pose from putative point pairs.

    Minimal samples are 2 pairs solved in closed form; the hypothesis with the
    most pairs within ``inlier_radius`` (xy) is refit by least squares on its
    inliers until the inlier set stops growing. Pairs are put in a canonical
    order first, so the result does not depend on input order.
    """
    q = np.asarray(query_pts, dtype=float).reshape(-1, 3)
    g = np.asarray(global_pts, dtype=float).reshape(-1, 3)
    n = len(q)
    if n < 2 or len(g) != n:
        raise DegenerateInput(f"need >= 2 correspondences, got {n}")
    q_ids = np.arange(n) if query_ids is None else np.asarray(query_ids)
    g_ids = np.arange(n) if global_ids is None else np.asarray(global_ids)

    order = np.lexsort(np.concatenate([q, g], axis=1).T[::-1])
    q, g, q_ids, g_ids = q[order], g[order], q_ids[order], g_ids[order]
    q2, g2 = q[:, :2], g[:, :2]
    r = cfg.inlier_radius
    rng = np.random.default_rng(cfg.seed)

    best_count, best_yaw, best_t = -1, 0.0, np.zeros(2)
    needed, done = cfg.max_iterations, 0
    while done < min(needed, cfg.max_iterations):
        b = min(chunk, cfg.max_iterations - done)
        i = rng.integers(n, size=b)
        j = rng.integers(n - 1, size=b)
        j += j >= i
        done += b
        dq = np.linalg.norm(q2[j] - q2[i], axis=1)
        dg = np.linalg.norm(g2[j] - g2[i], axis=1)
        ok = (dq > 1e-9) & (np.abs(dq - dg) <= 2 * r)
        if not ok.any():
            continue
        i, j = i[ok], j[ok]
        yaw, t = _two_point(q2[i], q2[j], g2[i], g2[j])
        c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
        px = c * q2[None, :, 0] - s * q2[None, :, 1] + t[:, 0:1]
        py = s * q2[None, :, 0] + c * q2[None, :, 1] + t[:, 1:2]
        counts = ((px - g2[None, :, 0]) ** 2 + (py - g2[None, :, 1]) ** 2 <= r * r).sum(1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_yaw, best_t = int(counts[k]), float(yaw[k]), t[k].copy()
            w = best_count / n
            if w >= 1.0:
                needed = done
            elif w > 0:
                needed = int(math.ceil(math.log(1 - cfg.confidence) / math.log(1 - w * w)))

    if best_count < 0:
        return LocalizationResult(PoseSE2z(), [], False, n_correspondences=n, iterations=done)

    pose = PoseSE2z(best_t[0], best_t[1], best_yaw)
    inliers = np.flatnonzero(_residuals(pose, q, g) <= r)
    for _ in range(10):
        if len(inliers) < 2:
            break
        pose = fit_planar_rigid(q[inliers], g[inliers])
        new = np.flatnonzero(_residuals(pose, q, g) <= r)
        if len(new) <= len(inliers) or np.array_equal(new, inliers):
            break
        inliers = new
    if len(inliers) >= 2:
        pose = fit_planar_rigid(q[inliers], g[inliers])
    kept = _one_to_one(inliers, _residuals(pose, q, g), q_ids, g_ids)
    pairs = [(int(q_ids[k]), int(g_ids[k])) for k in kept]
    return LocalizationResult(
        pose, pairs, len(pairs) >= cfg.t_ransac, n_correspondences=n, iterations=done
    )


def translation_error(estimate: PoseSE2z, truth: PoseSE2z) -> float:
    return math.hypot(estimate.x - truth.x, estimate.y - truth.y)


def localize(qlsm: ObjectMap, global_map: ObjectMap, extractor: Extractor, cfg: MatchConfig = MatchConfig(),
             global_db: DescriptorDB | None = None, truth: PoseSE2z | None = None) -> LocalizationResult:
    """Extract query descriptors, match them to the global database, and register."""
    if len(qlsm) == 0 or len(global_map) == 0:
        raise DegenerateInput("both maps must be non-empty")
    if global_db is None:
        global_db = extractor.describe(global_map)
    t0 = time.perf_counter()
    query_db = extractor.describe(qlsm)
    t1 = time.perf_counter()
    corr = knn_candidates(query_db, global_db, cfg.K)
    if len(corr) < 2:
        res = LocalizationResult(PoseSE2z(), [], False, n_correspondences=len(corr))
    else:
        res = ransac_align(
            qlsm.positions[corr.query_rows], global_map.positions[_rows_for(global_map, global_db, corr)],
            cfg, corr.query_ids, corr.global_ids,
        )
    res.t_compute = t1 - t0
    res.t_match = time.perf_counter() - t1
    if truth is not None:
        res.translation_error = translation_error(res.pose, truth)
    return res


def _rows_for(global_map: ObjectMap, global_db: DescriptorDB, corr: Correspondences) -> np.ndarray:
    if np.array_equal(global_map.ids, global_db.ids):
        return corr.global_rows
    lookup = {int(i): r for r, i in enumerate(global_map.ids)}
    return np.array([lookup[int(i)] for i in corr.global_ids], dtype=np.int64)
