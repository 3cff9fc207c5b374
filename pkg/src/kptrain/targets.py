"""Binarized supervision targets for the keypoint detector.

Pipeline per view of a pair::

    track projections -> bilinear splat -> Gaussian smoothing
      -> multiply with the other view's smoothed prior warped into this view
      -> combine with the detector's own (detached) prediction
      -> h x h non-max suppression -> top-k binarization

Everything here is plain numpy on float64 and carries no gradient; the
trainer treats the resulting masks as constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Warp, project, warp_map

log = logging.getLogger(__name__)

PER_PAIR = "per_pair"
PER_BATCH = "per_batch"


class EmptyPriorError(ValueError):
    """The pair has no co-visible tracks; it must be skipped."""


class DegenerateTargetError(ValueError):
    """A target map collapsed to zero mass or has no candidates."""


@dataclass
class TargetConfig:
    prior_sigma: float = 0.5
    prior_strength: float = 50.0
    nms_window: int = 3
    k: int = 1024
    topk_scope: str = PER_PAIR
    strength_schedule: str = "constant"  # or "linear_decay"

    def __post_init__(self):
        if self.nms_window < 1 or self.nms_window % 2 == 0:
            raise ValueError(f"nms_window must be an odd integer >= 1, got {self.nms_window}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.prior_strength <= 0:
            raise ValueError("prior_strength must be > 0")
        if self.prior_sigma <= 0:
            raise ValueError("prior_sigma must be > 0")
        if self.topk_scope not in (PER_PAIR, PER_BATCH):
            raise ValueError(f"unknown topk_scope {self.topk_scope!r}")
        if self.strength_schedule not in ("constant", "linear_decay"):
            raise ValueError(f"unknown strength_schedule {self.strength_schedule!r}")

    def effective_strength(self, progress: float = 0.0) -> float:
        """Prior strength at training progress ``t/T`` in [0, 1]."""
        if self.strength_schedule == "linear_decay":
            progress = min(max(progress, 0.0), 1.0)
            return self.prior_strength * (1 - progress) + 1.0 * progress
        return self.prior_strength


@dataclass
class TargetMap:
    mask: np.ndarray
    k_effective: int

    @property
    def coords(self) -> np.ndarray:
        ys, xs = np.nonzero(self.mask)
        return np.stack([xs, ys], axis=1)


def _normalize(values: np.ndarray) -> np.ndarray:
    total = values.sum()
    if not total > 0:
        raise DegenerateTargetError("map has no positive mass")
    return values / total


def splat(xy: np.ndarray, shape, weights=None) -> np.ndarray:
    """Bilinear splatting of point masses; coordinates are clamped to the pixel-centre hull."""
    h, w = shape
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    weights = np.ones(len(xy)) if weights is None else np.asarray(weights, dtype=np.float64)
    x = np.clip(xy[:, 0], 0, w - 1)
    y = np.clip(xy[:, 1], 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    ax, ay = x - x0, y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    out = np.zeros(shape)
    np.add.at(out, (y0, x0), weights * (1 - ax) * (1 - ay))
    np.add.at(out, (y0, x1), weights * ax * (1 - ay))
    np.add.at(out, (y1, x0), weights * (1 - ax) * ay)
    np.add.at(out, (y1, x1), weights * ax * ay)
    return out


def base_prior(pair, view: str) -> np.ndarray:
    """Unit-mass delta map of the co-visible track projections in view ``'a'`` or ``'b'``."""
    if len(pair.tracks) == 0:
        raise EmptyPriorError("pair has no co-visible tracks")
    v = pair.view_a if view == "a" else pair.view_b
    proj = project(pair.tracks.points, v)
    return splat(proj.xy, v.shape, np.full(len(proj.xy), 1.0 / len(proj.xy)))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Gaussian truncated at +-3 sigma (radius ``ceil(3 sigma)``), renormalized to unit sum."""
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with half-sample reflection at the borders.

    Symmetric kernel + half-sample reflection makes the operator mass
    preserving as long as the kernel radius is below the image size.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(np.asarray(values, dtype=np.float64), k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def consistency_product(map_self: np.ndarray, map_other_warped: np.ndarray, mask=None) -> np.ndarray:
    out = map_self * map_other_warped
    if mask is not None:
        out = np.where(mask > 0, out, 0.0)
    return _normalize(out)


def apply_self_supervision(target: np.ndarray, predicted: np.ndarray, strength: float) -> np.ndarray:
    """Posterior ``target * predicted**(1/strength)``, renormalized.

    Computed in log space; pixels with zero target stay zero. ``strength=inf``
    returns the (renormalized) target.
    """
    support = target > 0
    if not support.any():
        raise DegenerateTargetError("target has no positive mass")
    logp = np.full(target.shape, -np.inf)
    inv = 0.0 if np.isinf(strength) else 1.0 / strength
    with np.errstate(divide="ignore"):
        lp = np.log(target[support])
        if inv:
            lp = lp + inv * np.log(np.maximum(predicted[support], np.finfo(np.float64).tiny))
    logp[support] = lp
    out = np.zeros(target.shape)
    out[support] = np.exp(lp - lp.max())
    return _normalize(out)


def nms_mask(posterior: np.ndarray, h: int) -> np.ndarray:
    """Pixels equal to the maximum of their (border-clipped) h x h window; ties kept."""
    if h < 1 or h % 2 == 0:
        raise ValueError("h must be an odd integer >= 1")
    if h == 1:
        return np.ones(posterior.shape, dtype=bool)
    return posterior >= ndimage.maximum_filter(posterior, size=h, mode="nearest")


def _rank_order(values: np.ndarray) -> np.ndarray:
    """Indices sorted by value descending, ties broken by ascending flat index."""
    return np.argsort(-values, kind="stable")


def topk_binarize(posterior: np.ndarray, nms: np.ndarray, k: int) -> TargetMap:
    """Select the k largest NMS-surviving positive posterior values of one map."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cand = nms & (posterior > 0)
    n = int(cand.sum())
    if n == 0:
        raise DegenerateTargetError("no surviving target candidates")
    flat = np.where(cand, posterior, -np.inf).ravel()
    keep = _rank_order(flat)[: min(k, n)]
    mask = np.zeros(flat.shape, dtype=bool)
    mask[keep] = True
    return TargetMap(mask.reshape(posterior.shape), len(keep))


def topk_binarize_batch(posteriors, nms_masks, k: int, scope: str = PER_PAIR) -> list:
    """Binarize a list of maps.

    ``per_pair`` selects k per map independently. ``per_batch`` selects
    ``k * len(posteriors)`` pixels over the concatenation of all maps, so the
    per-map counts vary with how concentrated each posterior is. This is the
    only cross-pair dependency in target construction: the whole batch must be
    available before any map can be binarized.
    """
    if scope == PER_PAIR:
        return [topk_binarize(p, m, k) for p, m in zip(posteriors, nms_masks)]
    if scope != PER_BATCH:
        raise ValueError(f"unknown topk scope {scope!r}")
    flats = [np.where(m & (p > 0), p, -np.inf).ravel() for p, m in zip(posteriors, nms_masks)]
    allv = np.concatenate(flats)
    n = int(np.isfinite(allv).sum())
    if n == 0:
        raise DegenerateTargetError("no surviving target candidates in batch")
    keep = _rank_order(allv)[: min(k * len(posteriors), n)]
    sel = np.zeros(allv.shape, dtype=bool)
    sel[keep] = True
    out, start = [], 0
    for p, f in zip(posteriors, flats):
        m = sel[start:start + f.size].reshape(p.shape)
        out.append(TargetMap(m, int(m.sum())))
        start += f.size
    return out


@dataclass
class PairPosterior:
    """Intermediate maps for one view of a pair (kept for tests and debug dumps)."""

    prior: np.ndarray
    smoothed: np.ndarray
    warped_other: np.ndarray
    warp_mask: np.ndarray
    consistent: np.ndarray
    posterior: np.ndarray
    nms: np.ndarray
    extras: dict = field(default_factory=dict)


def consistent_priors(pair, config: TargetConfig, consistency_threshold: float = 0.01):
    """Smoothed track priors of both views multiplied by each other's warp.

    Independent of the detector, so callers may cache the result per pair.
    """
    smoothed = {}
    priors = {}
    for v in ("a", "b"):
        priors[v] = base_prior(pair, v)
        smoothed[v] = smooth(priors[v], config.prior_sigma)
    ab = Warp(pair.view_a, pair.view_b, consistency_threshold)
    out = {}
    for v, warp, other in (("a", ab, "b"), ("b", ab.inverse(), "a")):
        warped, mask = warp_map(smoothed[other], warp)
        cons = consistency_product(smoothed[v], warped, mask)
        out[v] = (priors[v], smoothed[v], warped, mask, cons)
    return out


def pair_posteriors(pair, predicted_a, predicted_b, config: TargetConfig, progress: float = 0.0,
                    priors=None) -> tuple[PairPosterior, PairPosterior]:
    priors = priors if priors is not None else consistent_priors(pair, config)
    strength = config.effective_strength(progress)
    res = []
    for v, pred in (("a", predicted_a), ("b", predicted_b)):
        prior, sm, warped, mask, cons = priors[v]
        post = apply_self_supervision(cons, pred, strength)
        res.append(PairPosterior(prior, sm, warped, mask, cons, post, nms_mask(post, config.nms_window)))
    return res[0], res[1]


def build_targets(pair, predicted_a, predicted_b, config: TargetConfig, progress: float = 0.0):
    """Targets for both views of one pair with ``per_pair`` budgeting.

    Returns ``((target_a, target_b), (posterior_a, posterior_b))``. For the
    ``per_batch`` scope collect the posteriors of the whole batch and call
    :func:`topk_binarize_batch`.
    """
    pa, pb = pair_posteriors(pair, predicted_a, predicted_b, config, progress)
    scope = config.topk_scope if config.topk_scope == PER_PAIR else PER_BATCH
    ta, tb = topk_binarize_batch([pa.posterior, pb.posterior], [pa.nms, pb.nms], config.k, scope)
    return (ta, tb), (pa, pb)
