"""Keypoint extraction from a detector probability map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import normalized_to_pixel, pixel_to_normalized
from .targets import nms_mask

KEYPOINT_FORMAT = "KPTRAIN-KEYPOINTS 1"


@dataclass
class SampleConfig:
    budget: int = 5000
    alpha: float = 0.5
    density_window: int = 9
    posthoc_nms: bool = False
    subpixel: bool = True

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.density_window < 1 or self.density_window % 2 == 0:
            raise ValueError("density_window must be an odd integer >= 1")


@dataclass
class KeypointSet:
    """Keypoints in normalized ``[-1, 1]`` coordinates, sorted by score (descending)."""

    coords: np.ndarray  # (N, 2)
    scores: np.ndarray  # (N,)
    shape: tuple  # (H, W) of the source image

    def __len__(self):
        return len(self.scores)

    def pixels(self) -> np.ndarray:
        return normalized_to_pixel(self.coords, self.shape)

    def top(self, n: int) -> "KeypointSet":
        return KeypointSet(self.coords[:n], self.scores[:n], self.shape)


def local_density(prob: np.ndarray, window: int) -> np.ndarray:
    """Window x window box sum of ``prob`` (reflect boundary), floored at 1e-12."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 1")
    box = ndimage.uniform_filter(np.asarray(prob, dtype=np.float64), size=window, mode="reflect") * window ** 2
    return np.maximum(box, 1e-12)


def selection_scores(prob: np.ndarray, config: SampleConfig) -> np.ndarray:
    prob = np.asarray(prob, dtype=np.float64)
    if config.alpha == 0:
        return prob.copy()
    return prob / local_density(prob, config.density_window) ** config.alpha


def _subpixel_offsets(s: np.ndarray, ys, xs):
    """Per-axis parabola through the 3-neighbourhood; clamped to (-0.5, 0.5]."""
    h, w = s.shape
    off = np.zeros((len(xs), 2))
    for axis, (pos, lim) in enumerate(((xs, w), (ys, h))):
        inner = (pos > 0) & (pos < lim - 1)
        if not inner.any():
            continue
        yi, xi = ys[inner], xs[inner]
        if axis == 0:
            lo, mid, hi = s[yi, xi - 1], s[yi, xi], s[yi, xi + 1]
        else:
            lo, mid, hi = s[yi - 1, xi], s[yi, xi], s[yi + 1, xi]
        curv = lo - 2 * mid + hi
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(curv < 0, 0.5 * (lo - hi) / curv, 0.0)
        d = np.clip(np.nan_to_num(d), -0.5, 0.5)
        d[d <= -0.5] = np.nextafter(-0.5, 0.0)
        off[inner, axis] = d
    return off


def sample_keypoints(prob: np.ndarray, config: SampleConfig = SampleConfig()) -> KeypointSet:
    """Deterministic top-``budget`` selection on density-modulated scores.

    Score ``s = p / density**alpha``; ties are broken by row-major pixel index.
    With ``posthoc_nms`` only 3x3 local maxima of ``s`` are candidates.
    """
    prob = np.asarray(prob, dtype=np.float64)
    s = selection_scores(prob, config)
    cand = prob > 0  # not s > 0: the density division can underflow subnormal p to zero
    if config.posthoc_nms:
        cand &= nms_mask(s, 3)
    flat = np.where(cand, s, -np.inf).ravel()
    n = min(config.budget, int(cand.sum()))
    order = np.argsort(-flat, kind="stable")[:n]
    ys, xs = np.divmod(order, prob.shape[1])
    xy = np.stack([xs, ys], axis=1).astype(np.float64)
    if config.subpixel and n:
        xy += _subpixel_offsets(s, ys, xs)
    return KeypointSet(pixel_to_normalized(xy, prob.shape), flat[order], prob.shape)


def write_keypoints(path, kps: KeypointSet):
    """Header line, ``H W N`` line, then one ``x y score`` record per keypoint.

    Coordinates use ``%.8f``, scores ``%.9e``, fields separated by a single
    space, lines terminated by ``\\n``, ASCII encoded.
    """
    h, w = kps.shape
    lines = [KEYPOINT_FORMAT, f"{h} {w} {len(kps)}"]
    lines += [f"{x:.8f} {y:.8f} {s:.9e}" for (x, y), s in zip(kps.coords, kps.scores)]
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_keypoints(path) -> KeypointSet:
    with open(path, encoding="ascii") as f:
        header = f.readline().rstrip("\n")
        if header != KEYPOINT_FORMAT:
            raise ValueError(f"unsupported keypoint file header {header!r}")
        h, w, n = (int(v) for v in f.readline().split())
        data = np.loadtxt(f, ndmin=2) if n else np.zeros((0, 3))
    if len(data) != n:
        raise ValueError(f"expected {n} keypoints, found {len(data)}")
    return KeypointSet(data[:, :2].copy(), data[:, 2].copy(), (h, w))
