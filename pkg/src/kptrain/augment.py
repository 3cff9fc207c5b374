"""Quarter-turn rotations and horizontal flips applied jointly to grids and cameras.

A transform ``(k, flip)`` first mirrors the image left-right (if ``flip``) and
then rotates it ``k`` quarter-turns counter-clockwise (``np.rot90``). The camera
is updated so that projecting 3D points into the transformed view gives the
transformed pixel coordinates exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import Camera, CameraView

ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class AugTransform:
    rotation: int = 0  # degrees, one of ROTATIONS
    hflip: bool = False

    def __post_init__(self):
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}")

    @property
    def quarter_turns(self) -> int:
        return self.rotation // 90

    def then(self, other: "AugTransform") -> "AugTransform":
        """Composition: apply ``self`` first, then ``other``."""
        k1, k2 = self.quarter_turns, other.quarter_turns
        k = (k2 - k1) % 4 if other.hflip else (k1 + k2) % 4
        return AugTransform(90 * k, self.hflip != other.hflip)

    def inverse(self) -> "AugTransform":
        if self.hflip:
            return self
        return AugTransform((360 - self.rotation) % 360, False)

    def apply_grid(self, grid: np.ndarray) -> np.ndarray:
        out = grid[:, ::-1] if self.hflip else grid
        return np.ascontiguousarray(np.rot90(out, self.quarter_turns))

    def apply_points(self, xy, shape) -> np.ndarray:
        """Map pixel coordinates of the original grid to the transformed grid."""
        h, w = shape
        xy = np.asarray(xy, dtype=np.float64)
        x, y = xy[..., 0], xy[..., 1]
        if self.hflip:
            x = (w - 1) - x
        for _ in range(self.quarter_turns):
            # np.rot90 (CCW): (x, y) -> (y, W-1-x), grid becomes W x H
            x, y = y, (w - 1) - x
            h, w = w, h
        return np.stack([x, y], axis=-1)

    def output_shape(self, shape):
        return tuple(reversed(shape)) if self.quarter_turns % 2 else tuple(shape)


IDENTITY = AugTransform()
ALL_TRANSFORMS = tuple(AugTransform(r, f) for f in (False, True) for r in ROTATIONS)


def _pixel_affine(t: AugTransform, shape):
    """``(A, b)`` with new_xy = A @ xy + b for the grid transform."""
    b = t.apply_points(np.zeros(2), shape)
    ex = t.apply_points(np.array([1.0, 0.0]), shape) - b
    ey = t.apply_points(np.array([0.0, 1.0]), shape) - b
    return np.stack([ex, ey], axis=1), b


def apply_to_camera(cam: Camera, t: AugTransform) -> Camera:
    if t == IDENTITY:
        return cam.copy()
    A, b = _pixel_affine(t, cam.shape)
    A = np.rint(A)
    c = A @ np.array([cam.cx, cam.cy]) + b
    # A @ diag(f) = diag(g) @ P with P a signed permutation acting on the camera frame
    Af = A @ np.diag([cam.fx, cam.fy])
    P = np.sign(Af)
    fx, fy = np.abs(Af).sum(axis=1)
    Q = np.eye(3)
    Q[:2, :2] = P
    if np.linalg.det(P) < 0:
        # fold the mirror into a negative fx so the extrinsic rotation stays proper
        Q[0, :] *= -1
        fx = -fx
    h, w = t.output_shape(cam.shape)
    return Camera(float(fx), float(fy), float(c[0]), float(c[1]), Q @ cam.R, Q @ cam.t, w, h)


def apply_to_view(view: CameraView, t: AugTransform) -> CameraView:
    """Transform every grid of the view and update its camera consistently."""
    if t.quarter_turns % 2 and view.shape[0] != view.shape[1]:
        raise ValueError(f"quarter-turn rotation needs a square image, got {view.shape}")
    sid = None if view.surface_id is None else t.apply_grid(view.surface_id)
    return replace(
        view,
        camera=apply_to_camera(view.camera, t),
        image=t.apply_grid(view.image),
        depth=t.apply_grid(view.depth),
        valid=t.apply_grid(view.valid),
        surface_id=sid,
        meta={**view.meta, "aug": view.meta.get("aug", IDENTITY).then(t)},
    )


def apply_to_pair(pair, t_a: AugTransform, t_b: AugTransform):
    return replace(pair, view_a=apply_to_view(pair.view_a, t_a), view_b=apply_to_view(pair.view_b, t_b))


def sample_transform(rng, enable_rot: bool = True, enable_flip: bool = True) -> AugTransform:
    """Uniform draw from the enabled subgroup; identity when both are disabled."""
    rot = 90 * int(rng.integers(4)) if enable_rot else 0
    flip = bool(rng.integers(2)) if enable_flip else False
    return AugTransform(rot, flip)
