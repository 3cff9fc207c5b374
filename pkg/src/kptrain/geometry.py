"""Pinhole camera math and depth-based cross-view warping.

Pixel convention used throughout the package: integer coordinates address
pixel centres, so pixel ``(x, y)`` covers ``[x - 0.5, x + 0.5) x [y - 0.5, y + 0.5)``.
Normalized coordinates live in ``[-1, 1]`` where ``-1`` is the left/top edge
of the image (the first pixel centre minus half a pixel)::

    x_norm = (2 * x + 1) / W - 1

Cameras map world points to camera frame as ``X_cam = R @ X_world + t``; the
camera looks down its +z axis with x to the right and y down.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np


@dataclass
class Camera:
    """Pinhole intrinsics + world-to-camera extrinsics for an ``height x width`` image.

    A negative ``fx`` is allowed and encodes a mirrored image (used by the
    horizontal-flip augmentation, which keeps ``R`` a proper rotation).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @property
    def intrinsics(self) -> tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def copy(self) -> "Camera":
        return replace(self, R=self.R.copy(), t=self.t.copy())


def look_at(position, target, fx, fy, width, height, up=(0.0, 0.0, 1.0)) -> Camera:
    """Upright camera at ``position`` looking at ``target`` (world z is up)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise ValueError("viewing direction is parallel to the up vector")
    right /= norm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, R, -R @ position, width, height)


@dataclass
class CameraView:
    """One rendered view: camera plus image, depth and per-pixel masks.

    ``depth`` holds camera-frame z; ``valid`` marks pixels with usable depth
    (the stand-in for MVS coverage); ``surface_id`` is the index of the
    surface hit by each pixel ray, -1 where the ray escapes the scene.
    """

    camera: Camera
    image: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    surface_id: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.depth.shape or self.valid.shape != self.depth.shape:
            raise ValueError(
                f"image {self.image.shape}, depth {self.depth.shape} and valid "
                f"{self.valid.shape} must share one H x W"
            )
        if self.image.shape != self.camera.shape:
            raise ValueError(f"grid shape {self.image.shape} does not match camera {self.camera.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    @property
    def intrinsics(self):
        return self.camera.intrinsics


def _camera_of(view) -> Camera:
    return view.camera if isinstance(view, CameraView) else view


class Projection(NamedTuple):
    xy: np.ndarray  # (N, 2) pixel coordinates
    depth: np.ndarray  # (N,) camera-frame z
    valid: np.ndarray  # (N,) depth > 0


class WarpResult(NamedTuple):
    xy: np.ndarray  # landing coordinates in the target image
    valid: np.ndarray  # landed inside target, positive depth, not occluded
    occluded: np.ndarray  # failed the target depth-consistency check


def to_camera_frame(points3d, view) -> np.ndarray:
    cam = _camera_of(view)
    return np.atleast_2d(np.asarray(points3d, dtype=np.float64)) @ cam.R.T + cam.t


def project(points3d, view) -> Projection:
    """Pinhole projection; points at or behind the camera plane are flagged invalid."""
    cam = _camera_of(view)
    pc = to_camera_frame(points3d, cam)
    z = pc[:, 2]
    valid = z > 0
    safe_z = np.where(valid, z, 1.0)
    xy = np.stack([cam.fx * pc[:, 0] / safe_z + cam.cx, cam.fy * pc[:, 1] / safe_z + cam.cy], axis=1)
    xy[~valid] = np.nan
    return Projection(xy, z, valid)


def unproject(xy, depth, view) -> np.ndarray:
    """Back-project pixel coordinates with camera-frame depths to world points."""
    cam = _camera_of(view)
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    pc = np.stack(
        [(xy[:, 0] - cam.cx) / cam.fx * depth, (xy[:, 1] - cam.cy) / cam.fy * depth, depth], axis=1
    )
    return (pc - cam.t) @ cam.R


def in_image(xy, shape) -> np.ndarray:
    h, w = shape
    x, y = xy[:, 0], xy[:, 1]
    with np.errstate(invalid="ignore"):
        return (x >= -0.5) & (x < w - 0.5) & (y >= -0.5) & (y < h - 0.5)


def pixel_to_normalized(xy, shape) -> np.ndarray:
    h, w = shape
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([(2 * xy[..., 0] + 1) / w - 1, (2 * xy[..., 1] + 1) / h - 1], axis=-1)


def normalized_to_pixel(xy_norm, shape) -> np.ndarray:
    h, w = shape
    xy_norm = np.asarray(xy_norm, dtype=np.float64)
    return np.stack([((xy_norm[..., 0] + 1) * w - 1) / 2, ((xy_norm[..., 1] + 1) * h - 1) / 2], axis=-1)


def bilinear_sample(grid, xy) -> np.ndarray:
    """Bilinear lookup at pixel coordinates, clamped to the pixel-centre hull."""
    h, w = grid.shape
    x = np.clip(xy[:, 0], 0, w - 1)
    y = np.clip(xy[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros(len(y), np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = x - x0
    ay = y - y0
    return (
        grid[y0, x0] * (1 - ax) * (1 - ay)
        + grid[y0, x1] * ax * (1 - ay)
        + grid[y1, x0] * (1 - ax) * ay
        + grid[y1, x1] * ax * ay
    )


def _neighbours(shape, xy):
    h, w = shape
    x = np.clip(xy[:, 0], 0, w - 1)
    y = np.clip(xy[:, 1], 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x, y, x0, y0, x1, y1


def sample_depth(view: CameraView, xy, rel_tol: float = 0.01):
    """Depth at sub-pixel locations.

    Inverse depth is interpolated bilinearly when all four neighbouring pixels
    are valid and lie on one surface (inverse depth is affine in pixel
    coordinates on a plane, so this is exact there). Otherwise the nearest
    pixel is used if valid. Returns ``(depth, ok)``.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    n = len(xy)
    depth = np.zeros(n)
    ok = np.zeros(n, dtype=bool)
    finite = np.all(np.isfinite(xy), axis=1)
    if not finite.any():
        return depth, ok
    x, y, x0, y0, x1, y1 = _neighbours(view.shape, np.where(finite[:, None], xy, 0.0))
    d, v = view.depth, view.valid
    corners = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
    all_valid = np.logical_and.reduce([v[c] for c in corners])
    cd = np.stack([d[c] for c in corners])
    if view.surface_id is not None:
        sid = np.stack([view.surface_id[c] for c in corners])
        coherent = np.all(sid == sid[0], axis=0)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            coherent = cd.max(axis=0) <= (1 + rel_tol) * cd.min(axis=0)
    use_interp = finite & all_valid & coherent
    if use_interp.any():
        with np.errstate(divide="ignore"):
            inv = 1.0 / np.where(cd > 0, cd, np.inf)
        ax, ay = x - x0, y - y0
        inv_i = inv[0] * (1 - ax) * (1 - ay) + inv[1] * ax * (1 - ay) + inv[2] * (1 - ax) * ay + inv[3] * ax * ay
        depth[use_interp] = 1.0 / inv_i[use_interp]
        ok[use_interp] = True
    rest = finite & ~use_interp
    if rest.any():
        xn = np.clip(np.rint(x).astype(np.int64), 0, view.shape[1] - 1)
        yn = np.clip(np.rint(y).astype(np.int64), 0, view.shape[0] - 1)
        good = rest & v[yn, xn]
        depth[good] = d[yn, xn][good]
        ok[good] = True
    return depth, ok


@dataclass
class Warp:
    """Depth-based mapping from ``source`` pixels into ``target``.

    ``consistency_threshold`` is the relative depth tolerance of the occlusion
    test: a warped point is visible when the target depth agrees with its
    transformed depth to within this fraction.
    """

    source: CameraView
    target: CameraView
    consistency_threshold: float = 0.01

    def inverse(self) -> "Warp":
        return Warp(self.target, self.source, self.consistency_threshold)


def _visible_in_target(target: CameraView, xy, z, rel_tol):
    """Depth-consistency test against the target depth map around ``xy``."""
    n = len(xy)
    visible = np.zeros(n, dtype=bool)
    checked = np.zeros(n, dtype=bool)
    interp, ok = sample_depth(target, xy, rel_tol)
    with np.errstate(invalid="ignore", divide="ignore"):
        hit = ok & (np.abs(interp - z) <= rel_tol * z)
    visible |= hit
    checked |= ok
    # depth edges: accept if any valid neighbouring pixel agrees
    _, _, x0, y0, x1, y1 = _neighbours(target.shape, np.nan_to_num(xy))
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        v = target.valid[yy, xx]
        dd = target.depth[yy, xx]
        visible |= v & (np.abs(dd - z) <= rel_tol * z)
        checked |= v
    return visible, checked


def warp_points(xy, warp: Warp) -> WarpResult:
    """Warp source pixel coordinates into the target view.

    Invalid source depth, landing outside the target or behind its camera, and
    landing on a target pixel without valid depth all give ``valid=False``;
    failing the depth-consistency test additionally sets ``occluded=True``.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    n = len(xy)
    depth, ok = sample_depth(warp.source, xy, warp.consistency_threshold)
    out = np.full((n, 2), np.nan)
    valid = np.zeros(n, dtype=bool)
    occluded = np.zeros(n, dtype=bool)
    if not ok.any():
        return WarpResult(out, valid, occluded)
    world = unproject(xy[ok], depth[ok], warp.source)
    proj = project(world, warp.target)
    idx = np.flatnonzero(ok)
    out[idx] = proj.xy
    inside = proj.valid & in_image(proj.xy, warp.target.shape)
    vis, checked = _visible_in_target(warp.target, np.where(inside[:, None], proj.xy, 0.0), proj.depth,
                                      warp.consistency_threshold)
    valid[idx] = inside & vis
    occluded[idx] = inside & checked & ~vis
    return WarpResult(out, valid, occluded)


def warp_point(x: float, y: float, warp: Warp) -> WarpResult:
    res = warp_points([[x, y]], warp)
    return WarpResult(res.xy[0], bool(res.valid[0]), bool(res.occluded[0]))


def pixel_grid(shape) -> np.ndarray:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def warp_map(values: np.ndarray, warp: Warp) -> tuple[np.ndarray, np.ndarray]:
    """Pull a map defined on ``warp.target`` onto the ``warp.source`` pixel grid.

    For every source pixel the map is bilinearly sampled where that pixel lands
    in the target. Pixels whose warp is invalid or occluded get value 0 and
    mask 0. Returns ``(warped, mask)`` on the source grid.
    """
    values = np.asarray(values)
    if values.shape != warp.target.shape:
        raise ValueError(f"map shape {values.shape} does not match target view {warp.target.shape}")
    res = warp_points(pixel_grid(warp.source.shape), warp)
    out = np.zeros(res.valid.shape)
    if res.valid.any():
        out[res.valid] = bilinear_sample(values.astype(np.float64), res.xy[res.valid])
    return out.reshape(warp.source.shape), res.valid.reshape(warp.source.shape).astype(np.float64)


def relative_pose(view_a, view_b) -> tuple[np.ndarray, np.ndarray]:
    """``(R, t)`` with ``X_b = R @ X_a + t`` between camera frames."""
    ca, cb = _camera_of(view_a), _camera_of(view_b)
    R = cb.R @ ca.R.T
    return R, cb.t - R @ ca.t
