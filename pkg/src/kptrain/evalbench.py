"""Downstream evaluation: repeatability, ground-truth matching and two-view pose accuracy.

Keypoints are matched with the exact depth warp (mutual nearest neighbour
within a pixel tolerance), which isolates detector quality from any
descriptor or learned matcher. Relative pose is then estimated with an
8-point essential-matrix RANSAC and scored by pose-error AUC and mAA.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Camera, Warp, relative_pose, warp_points
from .sampler import KeypointSet, SampleConfig, sample_keypoints

METRICS_FORMAT = "KPTRAIN-METRICS 1"
AUC_THRESHOLDS = (5.0, 10.0, 20.0)


class InsufficientMatches(ValueError):
    def __init__(self, n):
        super().__init__(f"need at least 8 matches for the 8-point solver, got {n}")
        self.n = n


@dataclass
class MatchSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    residual: np.ndarray  # pixels, in image B

    def __len__(self):
        return len(self.idx_a)


@dataclass
class RansacConfig:
    threshold_px: float = 0.2
    max_iters: int = 1000
    confidence: float = 0.999
    seed: int = 0


@dataclass
class PoseEstimate:
    R: np.ndarray
    t: np.ndarray
    inliers: np.ndarray
    degenerate: bool = False


def _pixels(kps) -> np.ndarray:
    if isinstance(kps, KeypointSet):
        return kps.pixels()
    return np.atleast_2d(np.asarray(kps, dtype=np.float64)).reshape(-1, 2)


def _nearest(src: np.ndarray, dst: np.ndarray, chunk: int = 512):
    """Index of and distance to the nearest ``dst`` point for each ``src`` (first index on ties)."""
    idx = np.zeros(len(src), dtype=np.int64)
    dist = np.full(len(src), np.inf)
    if len(dst) == 0:
        return idx, dist
    for s in range(0, len(src), chunk):
        d = np.linalg.norm(src[s:s + chunk, None, :] - dst[None, :, :], axis=-1)
        idx[s:s + chunk] = np.argmin(d, axis=1)
        dist[s:s + chunk] = d[np.arange(len(d)), idx[s:s + chunk]]
    return idx, dist


def mutual_nearest(src: np.ndarray, src_valid: np.ndarray, dst: np.ndarray, epsilon: float):
    """Mutual nearest neighbours between valid ``src`` points and ``dst`` with distance < epsilon."""
    vi = np.flatnonzero(src_valid)
    if len(vi) == 0 or len(dst) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    fwd, dist = _nearest(src[vi], dst)
    back, _ = _nearest(dst, src[vi])
    mutual = back[fwd] == np.arange(len(vi))
    keep = mutual & (dist < epsilon)
    return vi[keep], fwd[keep], dist[keep]


def oracle_match(kps_a, kps_b, warp: Warp, epsilon_px: float = 2.0) -> MatchSet:
    """Match A to B by warping A's keypoints with the ground-truth depth warp."""
    pa, pb = _pixels(kps_a), _pixels(kps_b)
    res = warp_points(pa, warp)
    ia, ib, d = mutual_nearest(res.xy, res.valid, pb, epsilon_px)
    return MatchSet(ia, ib, d)


def repeatability(kps_a, kps_b, warp: Warp, epsilon_px: float = 2.0) -> float:
    """Symmetric mutual-nearest re-detection rate; NaN when no keypoint is co-visible.

    Keypoints that warp outside the other image, onto invalid depth, or are
    occluded do not count in the denominator of their direction.
    """
    if epsilon_px <= 0:
        raise ValueError("epsilon_px must be > 0")
    pa, pb = _pixels(kps_a), _pixels(kps_b)
    rates = []
    for src, dst, w in ((pa, pb, warp), (pb, pa, warp.inverse())):
        res = warp_points(src, w) if len(src) else None
        n = 0 if res is None else int(res.valid.sum())
        if n == 0:
            continue
        ia, _, _ = mutual_nearest(res.xy, res.valid, dst, epsilon_px)
        rates.append(len(ia) / n)
    return float(np.mean(rates)) if rates else float("nan")


def _intrinsics(k):
    if isinstance(k, Camera):
        return k.intrinsics
    return tuple(float(v) for v in k)


def normalize_points(xy, intrinsics) -> np.ndarray:
    fx, fy, cx, cy = _intrinsics(intrinsics)
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([(xy[:, 0] - cx) / fx, (xy[:, 1] - cy) / fy], axis=1)


def _conditioning(x):
    c = x.mean(axis=0)
    s = math.sqrt(2) / max(np.mean(np.linalg.norm(x - c, axis=1)), 1e-15)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _to_essential(E):
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def _nullspace_fit(xa: np.ndarray, xb: np.ndarray):
    """Least-squares null vector of the epipolar design matrix, batched over leading dims.

    Also returns the 8th singular value over the largest one; it vanishes when
    the correspondences do not pin down a unique matrix (degenerate layout).
    """
    ones = np.ones(xa.shape[:-1] + (1,))
    ha = np.concatenate([xa, ones], axis=-1)
    hb = np.concatenate([xb, ones], axis=-1)
    A = (hb[..., :, :, None] * ha[..., :, None, :]).reshape(*xa.shape[:-1], 9)
    _, S, Vt = np.linalg.svd(A, full_matrices=True)
    M = Vt[..., -1, :].reshape(*xa.shape[:-2], 3, 3)
    return M, S[..., 7] / np.maximum(S[..., 0], 1e-300)


def eight_point(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Essential matrices from normalized correspondences ``(..., N, 2)``, N >= 8."""
    M, _ = _nullspace_fit(xa, xb)
    U, _, Vt = np.linalg.svd(M)
    return U @ (np.array([1.0, 1.0, 0.0])[:, None] * Vt)


def _eight_point_conditioned(xa, xb):
    Ta, Tb = _conditioning(xa), _conditioning(xb)
    ya = xa @ Ta[:2, :2].T + Ta[:2, 2]
    yb = xb @ Tb[:2, :2].T + Tb[:2, 2]
    M, ratio = _nullspace_fit(ya, yb)
    return _to_essential(Tb.T @ M @ Ta), float(ratio)


def sampson(E, xa, xb) -> np.ndarray:
    """Sampson error; ``E`` may be ``(M, 3, 3)`` giving ``(M, N)``."""
    ones = np.ones((len(xa), 1))
    ha = np.concatenate([xa, ones], axis=1)
    hb = np.concatenate([xb, ones], axis=1)
    Ea = ha @ np.swapaxes(E, -1, -2)  # rows: E @ x_a
    Etb = hb @ E  # rows: E^T @ x_b
    num = np.sum(hb * Ea, axis=-1) ** 2
    den = Ea[..., 0] ** 2 + Ea[..., 1] ** 2 + Etb[..., 0] ** 2 + Etb[..., 1] ** 2
    return num / np.maximum(den, 1e-300)


def triangulate(R, t, xa, xb) -> np.ndarray:
    """Linear triangulation in camera-A frame with P_a = [I|0], P_b = [R|t]."""
    Pa = np.hstack([np.eye(3), np.zeros((3, 1))])
    Pb = np.hstack([R, t[:, None]])
    A = np.stack([
        xa[:, 0, None] * Pa[2] - Pa[0],
        xa[:, 1, None] * Pa[2] - Pa[1],
        xb[:, 0, None] * Pb[2] - Pb[0],
        xb[:, 1, None] * Pb[2] - Pb[1],
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[:, :3] / X[:, 3:]


def decompose_essential(E, xa, xb):
    """Pick the (R, t) of the four decompositions with the most points in front of both cameras."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best, best_count = None, -1
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            X = triangulate(R, t, xa, xb)
            zb = X @ R[2] + t[2]
            count = int(np.sum((X[:, 2] > 0) & (zb > 0)))
            if count > best_count:
                best, best_count = (R, t / np.linalg.norm(t)), count
    return best[0], best[1], best_count


def estimate_relative_pose(xy_a, xy_b, intrinsics_a, intrinsics_b, ransac: RansacConfig = RansacConfig()) -> PoseEstimate:
    """RANSAC over 8-point essential hypotheses on matched pixel coordinates.

    Matches are put in a canonical (lexicographic) order before sampling so the
    result does not depend on the order they were given in.
    """
    xy_a = np.asarray(xy_a, dtype=np.float64).reshape(-1, 2)
    xy_b = np.asarray(xy_b, dtype=np.float64).reshape(-1, 2)
    n = len(xy_a)
    if n < 8:
        raise InsufficientMatches(n)
    order = np.lexsort((xy_b[:, 1], xy_b[:, 0], xy_a[:, 1], xy_a[:, 0]))
    xa = normalize_points(xy_a[order], intrinsics_a)
    xb = normalize_points(xy_b[order], intrinsics_b)
    focals = [abs(v) for v in _intrinsics(intrinsics_a)[:2] + _intrinsics(intrinsics_b)[:2]]
    thr2 = (ransac.threshold_px / float(np.mean(focals))) ** 2

    rng = np.random.default_rng(ransac.seed)
    best_inl, best_score = None, (-1, -np.inf)
    needed, done, chunk = ransac.max_iters, 0, 64
    while done < min(needed, ransac.max_iters):
        m = min(chunk, ransac.max_iters - done)
        samples = np.argsort(rng.random((m, n)), axis=1)[:, :8]
        E = eight_point(xa[samples], xb[samples])
        err = sampson(E, xa, xb)
        inl = err <= thr2
        counts = inl.sum(axis=1)
        cost = np.where(inl, err, thr2).sum(axis=1)
        for i in range(m):
            score = (int(counts[i]), -float(cost[i]))
            if score > best_score:
                best_score, best_inl = score, inl[i]
        done += m
        w = best_score[0] / n
        if w >= 1:
            needed = done
        elif w > 0:
            denom = math.log(max(1 - w ** 8, 1e-300))
            needed = math.ceil(math.log(1 - ransac.confidence) / denom) if denom < 0 else ransac.max_iters

    inliers = best_inl.copy()
    if inliers.sum() >= 8:
        E, ratio = _eight_point_conditioned(xa[inliers], xb[inliers])
        refit = sampson(E, xa, xb) <= thr2
        if refit.sum() >= inliers.sum():
            inliers = refit
            E, ratio = _eight_point_conditioned(xa[inliers], xb[inliers])
        degenerate = ratio < 1e-9
    else:
        E, ratio = _eight_point_conditioned(xa, xb)
        degenerate = True
    R, t, front = decompose_essential(E, xa[inliers], xb[inliers])
    if front == 0:
        degenerate = True
    flags = np.zeros(n, dtype=bool)
    flags[order] = inliers
    return PoseEstimate(R, t, flags, degenerate)


def estimate_pose(matches: MatchSet, kps_a, kps_b, intrinsics_a, intrinsics_b,
                  ransac: RansacConfig = RansacConfig()) -> PoseEstimate:
    pa, pb = _pixels(kps_a), _pixels(kps_b)
    if len(matches) < 8:
        raise InsufficientMatches(len(matches))
    return estimate_relative_pose(pa[matches.idx_a], pb[matches.idx_b], intrinsics_a, intrinsics_b, ransac)


def rotation_angle_deg(R_a, R_b) -> float:
    """Geodesic angle between two rotations (robust near 0 and 180 degrees)."""
    D = R_a.T @ R_b
    s = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    c = 0.5 * (np.trace(D) - 1.0)
    return math.degrees(math.atan2(s, c))


def translation_angle_deg(t_a, t_b) -> float:
    na, nb = np.linalg.norm(t_a), np.linalg.norm(t_b)
    if na == 0 or nb == 0:
        return 0.0
    ang = math.degrees(math.atan2(np.linalg.norm(np.cross(t_a, t_b)), float(np.dot(t_a, t_b))))
    return min(ang, 180.0 - ang)


def pose_error(est: PoseEstimate, gt) -> float:
    """``max(rotation angle, translation-direction angle)`` in degrees.

    The translation angle is sign-agnostic (``min(a, 180 - a)``) as in the
    usual relative-pose benchmarks, and 0 when the true baseline is zero.
    """
    R_gt, t_gt = gt
    return max(rotation_angle_deg(est.R, R_gt), translation_angle_deg(est.t, np.asarray(t_gt, dtype=np.float64)))


def auc(errors, thresholds=AUC_THRESHOLDS) -> list:
    """Area under the cumulative accuracy curve up to each threshold, normalized by it.

    Failures are passed as ``inf``. Piecewise-linear (trapezoid) integration
    over the sorted errors.
    """
    errors = np.sort(np.asarray(list(errors), dtype=np.float64))
    if len(errors) == 0:
        raise ValueError("auc needs at least one error")
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    recall = np.arange(1, len(errors) + 1) / len(errors)
    errors = np.concatenate([[0.0], errors])
    recall = np.concatenate([[0.0], recall])
    out = []
    for thr in thresholds:
        last = int(np.searchsorted(errors, thr))
        r = np.concatenate([recall[:last], [recall[last - 1]]])
        e = np.concatenate([errors[:last], [thr]])
        out.append(float(np.sum((e[1:] - e[:-1]) * (r[1:] + r[:-1]) / 2) / thr))
    return out


def maa(errors, max_threshold: int = 10) -> float:
    """Mean over integer thresholds 1..max_threshold of the fraction of errors below each."""
    errors = np.asarray(list(errors), dtype=np.float64)
    if len(errors) == 0:
        raise ValueError("maa needs at least one error")
    return float(np.mean([(errors < t).mean() for t in range(1, max_threshold + 1)]))


@dataclass
class EvalConfig:
    repeat_epsilon_px: float = 2.0
    match_epsilon_px: float = 2.0
    ransac: RansacConfig = field(default_factory=RansacConfig)
    thresholds: tuple = AUC_THRESHOLDS
    seed: int = 0


@dataclass
class MetricsReport:
    repeatability: float
    auc: dict  # threshold (degrees) -> fraction
    maa: float
    per_pair: list
    keypoint_counts: list
    checkpoint: str = ""
    step: int = -1
    config_hash: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["auc"] = {str(k): v for k, v in self.auc.items()}
        return {"format": METRICS_FORMAT, **d}

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, allow_nan=True)

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path) as f:
            d = json.load(f)
        if d.pop("format", None) != METRICS_FORMAT:
            raise ValueError(f"{path}: not a metrics report")
        d["auc"] = {float(k): v for k, v in d["auc"].items()}
        return cls(**d)


def evaluate_pair(prob_a, prob_b, pair, sample_config: SampleConfig, eval_config: EvalConfig, index: int = 0) -> dict:
    kps_a = sample_keypoints(prob_a, sample_config)
    kps_b = sample_keypoints(prob_b, sample_config)
    warp = Warp(pair.view_a, pair.view_b)
    rep = repeatability(kps_a, kps_b, warp, eval_config.repeat_epsilon_px)
    matches = oracle_match(kps_a, kps_b, warp, eval_config.match_epsilon_px)
    rec = {"index": index, "n_kps_a": len(kps_a), "n_kps_b": len(kps_b), "repeatability": rep,
           "n_matches": len(matches), "error": math.inf, "status": "ok"}
    ransac = RansacConfig(**{**asdict(eval_config.ransac), "seed": eval_config.seed + index})
    try:
        est = estimate_pose(matches, kps_a, kps_b, pair.view_a.camera, pair.view_b.camera, ransac)
    except InsufficientMatches:
        rec["status"] = "insufficient_matches"
        return rec
    if est.degenerate:
        rec["status"] = "degenerate"
        return rec
    rec["error"] = pose_error(est, relative_pose(pair.view_a, pair.view_b))
    rec["n_inliers"] = int(est.inliers.sum())
    return rec


def evaluate_detector(prob_fn, pairs, sample_config: SampleConfig = SampleConfig(),
                      eval_config: EvalConfig = EvalConfig(), **report_fields) -> MetricsReport:
    """Run ``prob_fn(view) -> probability map`` over test pairs and aggregate metrics.

    Pairs are independent; RANSAC is seeded by ``eval_config.seed + index``.
    """
    recs = []
    for i, pair in enumerate(pairs):
        recs.append(evaluate_pair(prob_fn(pair.view_a), prob_fn(pair.view_b), pair, sample_config, eval_config, i))
    errors = [r["error"] for r in recs]
    reps = [r["repeatability"] for r in recs if not math.isnan(r["repeatability"])]
    aucs = auc(errors, eval_config.thresholds)
    return MetricsReport(
        repeatability=float(np.mean(reps)) if reps else float("nan"),
        auc={float(t): a for t, a in zip(eval_config.thresholds, aucs)},
        maa=maa(errors),
        per_pair=recs,
        keypoint_counts=[(r["n_kps_a"], r["n_kps_b"]) for r in recs],
        **report_fields,
    )
