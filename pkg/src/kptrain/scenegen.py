"""Synthetic textured scenes with exact cameras, depth and co-visible 3D tracks.

A scene is a set of textured rectangles (an open "room" of ground + walls,
optional free-standing panels and boxes sitting on the ground). Views are
rendered by exact ray casting, so depth and correspondences are known to
machine precision. Track points stand in for SfM tracks: most are placed on
corner-like texture locations, the rest uniformly on the surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Camera, CameraView, in_image, look_at, project


class ConfigError(ValueError):
    pass


class SamplingExhausted(RuntimeError):
    def __init__(self, attempts: int, min_overlap: float, max_overlap: float):
        super().__init__(
            f"no pair with overlap in [{min_overlap}, {max_overlap}] found after {attempts} attempts"
        )
        self.attempts = attempts


@dataclass(frozen=True)
class SceneConfig:
    n_planes: int = 4  # ground, back wall, left wall, right wall, then free panels
    n_boxes: int = 3
    n_tracks: int = 3000
    image_size: int = 128
    texel_size: float = 0.05
    gradient_fraction: float = 0.8
    hole_fraction: float = 0.15
    noise_sigma: float = 0.01
    fov_deg: float = 60.0
    room_half_size: float = 4.0
    wall_height: float = 4.0
    camera_distance: tuple = (5.0, 7.0)
    camera_elevation_deg: tuple = (15.0, 45.0)
    camera_azimuth_deg: tuple = (-35.0, 35.0)
    target_jitter: float = 0.75
    max_attempts: int = 200

    def validate(self):
        if self.n_planes < 0 or self.n_boxes < 0 or self.n_planes + self.n_boxes < 1:
            raise ConfigError("scene needs at least one surface (n_planes + n_boxes >= 1)")
        if self.n_tracks < 1:
            raise ConfigError("n_tracks must be >= 1")
        if self.image_size <= 0:
            raise ConfigError("image_size must be positive")
        if not 0 <= self.gradient_fraction <= 1 or not 0 <= self.hole_fraction < 1:
            raise ConfigError("gradient_fraction must be in [0, 1] and hole_fraction in [0, 1)")
        if self.texel_size <= 0:
            raise ConfigError("texel_size must be positive")

    @property
    def focal(self) -> float:
        return (self.image_size / 2.0) / np.tan(np.deg2rad(self.fov_deg) / 2.0)


@dataclass
class Rect:
    """Textured rectangle ``origin + s*u + t*v`` for ``s in [0, size_u]``, ``t in [0, size_v]``."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    size_u: float
    size_v: float
    texture: np.ndarray  # (rows along v, cols along u), values in [0, 1]
    texel: float

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    @property
    def area(self) -> float:
        return self.size_u * self.size_v

    def point(self, s, t) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)[..., None]
        t = np.asarray(t, dtype=np.float64)[..., None]
        return self.origin + s * self.u + t * self.v

    def residual(self, points) -> np.ndarray:
        """Distance off the plane, plus distance outside the rectangle bounds."""
        d = np.atleast_2d(points) - self.origin
        s, t = d @ self.u, d @ self.v
        off = np.abs(d @ self.normal)
        out_s = np.maximum(0, -s) + np.maximum(0, s - self.size_u)
        out_t = np.maximum(0, -t) + np.maximum(0, t - self.size_v)
        return off + out_s + out_t

    def albedo(self, s, t) -> np.ndarray:
        """Bilinear texture lookup at surface coordinates (texel centres at half-integers)."""
        rows, cols = self.texture.shape
        cu = np.clip(s / self.texel - 0.5, 0, cols - 1)
        cv = np.clip(t / self.texel - 0.5, 0, rows - 1)
        c0 = np.minimum(np.floor(cu).astype(np.int64), max(cols - 2, 0))
        r0 = np.minimum(np.floor(cv).astype(np.int64), max(rows - 2, 0))
        c1 = np.minimum(c0 + 1, cols - 1)
        r1 = np.minimum(r0 + 1, rows - 1)
        a, b = cu - c0, cv - r0
        tex = self.texture
        return (tex[r0, c0] * (1 - a) * (1 - b) + tex[r0, c1] * a * (1 - b)
                + tex[r1, c0] * (1 - a) * b + tex[r1, c1] * a * b)


@dataclass
class Scene:
    points3d: np.ndarray
    point_surface: np.ndarray
    surfaces: list
    seed: int
    config: SceneConfig
    light: np.ndarray = field(default_factory=lambda: np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8]))


@dataclass
class TrackSet:
    points: np.ndarray
    visibility_a: np.ndarray
    visibility_b: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if len(self.visibility_a) != n or len(self.visibility_b) != n:
            raise ValueError("visibility flags must match the number of points")

    def __len__(self):
        return len(self.points)


@dataclass
class TwoViewPair:
    view_a: CameraView
    view_b: CameraView
    tracks: TrackSet
    overlap: float
    meta: dict = field(default_factory=dict)


def _make_texture(rng, rows, cols) -> np.ndarray:
    tex = np.full((rows, cols), rng.uniform(0.25, 0.75))
    n_rect = max(2, int(rows * cols / 40))
    for _ in range(n_rect):
        h, w = rng.integers(2, 10, size=2)
        r, c = rng.integers(0, max(rows - 1, 1)), rng.integers(0, max(cols - 1, 1))
        tex[r:r + h, c:c + w] = rng.uniform(0.0, 1.0)
    return tex


def _rect(rng, origin, u, v, su, sv, texel) -> Rect:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u /= np.linalg.norm(u)
    v /= np.linalg.norm(v)
    cols = max(2, int(np.ceil(su / texel)))
    rows = max(2, int(np.ceil(sv / texel)))
    return Rect(np.asarray(origin, dtype=np.float64), u, v, float(su), float(sv),
                _make_texture(rng, rows, cols), texel)


def _box_faces(rng, center_xy, size, yaw, texel) -> list:
    sx, sy, sz = size
    c, s = np.cos(yaw), np.sin(yaw)
    ex = np.array([c, s, 0.0])
    ey = np.array([-s, c, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    base = np.array([center_xy[0], center_xy[1], 0.0]) - ex * sx / 2 - ey * sy / 2
    faces = [
        _rect(rng, base + ez * sz, ex, ey, sx, sy, texel),  # top
        _rect(rng, base, ex, ez, sx, sz, texel),  # -y side
        _rect(rng, base + ey * sy, ex, ez, sx, sz, texel),  # +y side
        _rect(rng, base, ey, ez, sy, sz, texel),  # -x side
        _rect(rng, base + ex * sx, ey, ez, sy, sz, texel),  # +x side
    ]
    return faces


def corner_response(texture: np.ndarray) -> np.ndarray:
    """Minimum eigenvalue of the smoothed gradient structure tensor."""
    gx = ndimage.sobel(texture, axis=1, mode="nearest")
    gy = ndimage.sobel(texture, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(gx * gx, 1.0)
    syy = ndimage.gaussian_filter(gy * gy, 1.0)
    sxy = ndimage.gaussian_filter(gx * gy, 1.0)
    tr = sxx + syy
    disc = np.sqrt(np.maximum((sxx - syy) ** 2 + 4 * sxy ** 2, 0))
    return np.maximum(0.5 * (tr - disc), 0)


def _sample_tracks(rng, surfaces, n_tracks, gradient_fraction):
    n_grad = int(round(n_tracks * gradient_fraction))
    n_rand = n_tracks - n_grad
    pts, owner = [], []
    if n_grad:
        responses = [corner_response(f.texture).ravel() for f in surfaces]
        sizes = np.cumsum([0] + [len(r) for r in responses])
        weights = np.concatenate(responses)
        if weights.sum() <= 0:
            n_rand += n_grad
        else:
            weights = weights / weights.sum()
            replace = np.count_nonzero(weights) < n_grad
            flat = rng.choice(len(weights), size=n_grad, replace=replace, p=weights)
            fidx = np.searchsorted(sizes, flat, side="right") - 1
            for fi, k in zip(fidx, flat - sizes[fidx]):
                f = surfaces[fi]
                r, c = divmod(int(k), f.texture.shape[1])
                s = min((c + 0.5) * f.texel, f.size_u)
                t = min((r + 0.5) * f.texel, f.size_v)
                pts.append(f.point(s, t))
                owner.append(fi)
    if n_rand:
        areas = np.array([f.area for f in surfaces])
        fidx = rng.choice(len(surfaces), size=n_rand, p=areas / areas.sum())
        for fi in fidx:
            f = surfaces[fi]
            pts.append(f.point(rng.uniform(0, f.size_u), rng.uniform(0, f.size_v)))
            owner.append(fi)
    return np.array(pts).reshape(-1, 3), np.array(owner, dtype=np.int64)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Build a random scene; a pure function of ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng(seed)
    R, H, tx = config.room_half_size, config.wall_height, config.texel_size
    surfaces = []
    fixed = [
        lambda: _rect(rng, [-R, -R, 0], [1, 0, 0], [0, 1, 0], 2 * R, 2 * R, tx),  # ground
        lambda: _rect(rng, [-R, R, 0], [1, 0, 0], [0, 0, 1], 2 * R, H, tx),  # back wall
        lambda: _rect(rng, [-R, -R, 0], [0, 1, 0], [0, 0, 1], 2 * R, H, tx),  # left wall
        lambda: _rect(rng, [R, -R, 0], [0, 1, 0], [0, 0, 1], 2 * R, H, tx),  # right wall
    ]
    for i in range(config.n_planes):
        if i < len(fixed):
            surfaces.append(fixed[i]())
        else:
            yaw = rng.uniform(0, np.pi)
            w, h = rng.uniform(1.0, 2.0, size=2)
            c = rng.uniform(-0.6 * R, 0.6 * R, size=2)
            u = np.array([np.cos(yaw), np.sin(yaw), 0.0])
            origin = np.array([c[0], c[1], rng.uniform(0.0, 1.0)]) - u * w / 2
            surfaces.append(_rect(rng, origin, u, [0, 0, 1], w, h, tx))
    for _ in range(config.n_boxes):
        size = rng.uniform(0.6, 1.6, size=3)
        surfaces.extend(_box_faces(rng, rng.uniform(-0.6 * R, 0.6 * R, size=2), size, rng.uniform(0, np.pi), tx))
    points, owner = _sample_tracks(rng, surfaces, config.n_tracks, config.gradient_fraction)
    return Scene(points, owner, surfaces, int(seed), config)


def random_camera(rng, config: SceneConfig) -> Camera:
    d = rng.uniform(*config.camera_distance)
    el = np.deg2rad(rng.uniform(*config.camera_elevation_deg))
    az = np.deg2rad(rng.uniform(*config.camera_azimuth_deg))
    pos = d * np.array([np.sin(az) * np.cos(el), -np.cos(az) * np.cos(el), np.sin(el)])
    target = np.array([0.0, 0.0, 0.6]) + rng.uniform(-1, 1, size=3) * config.target_jitter * np.array([1, 1, 0.5])
    f = config.focal
    return look_at(pos, target, f, f, config.image_size, config.image_size)


@dataclass
class RayHits:
    depth: np.ndarray  # (H, W) camera z, 0 where no hit
    surface_id: np.ndarray  # (H, W) int, -1 where no hit
    points: np.ndarray  # (H, W, 3) world hit points, nan where no hit
    s: np.ndarray
    t: np.ndarray


def cast_rays(scene: Scene, cam: Camera) -> RayHits:
    """Exact first-hit ray casting of every pixel centre."""
    h, w = cam.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dc = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1).reshape(-1, 3)
    dw = dc @ cam.R  # camera z of a ray point equals its ray parameter
    c = cam.center
    n = len(dw)
    best = np.full(n, np.inf)
    sid = np.full(n, -1, dtype=np.int64)
    bs = np.zeros(n)
    bt = np.zeros(n)
    for i, f in enumerate(scene.surfaces):
        nrm = f.normal
        denom = dw @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((f.origin - c) @ nrm) / denom
        p = c + lam[:, None] * dw
        rel = p - f.origin
        s, t = rel @ f.u, rel @ f.v
        hit = (np.abs(denom) > 1e-12) & (lam > 1e-9) & (s >= 0) & (s <= f.size_u) & (t >= 0) & (t <= f.size_v)
        closer = hit & (lam < best)
        best[closer] = lam[closer]
        sid[closer] = i
        bs[closer] = s[closer]
        bt[closer] = t[closer]
    hitmask = sid >= 0
    depth = np.where(hitmask, best, 0.0)
    pts = np.full((n, 3), np.nan)
    pts[hitmask] = c + depth[hitmask, None] * dw[hitmask]
    return RayHits(depth.reshape(h, w), sid.reshape(h, w), pts.reshape(h, w, 3), bs.reshape(h, w), bt.reshape(h, w))


def _hole_mask(rng, hit: np.ndarray, fraction: float) -> np.ndarray:
    """Blob-shaped invalidation of ``fraction`` of the hit pixels."""
    if fraction <= 0 or not hit.any():
        return np.zeros_like(hit)
    field_ = ndimage.gaussian_filter(rng.standard_normal(hit.shape), max(hit.shape) / 16.0)
    thr = np.quantile(field_[hit], 1.0 - fraction)
    return hit & (field_ > thr)


def render_view(scene: Scene, cam: Camera, rng, hits: RayHits | None = None) -> CameraView:
    """Lambertian shading of the bilinear texture, pixel noise and MVS-style holes."""
    hits = hits if hits is not None else cast_rays(scene, cam)
    cfg = scene.config
    image = np.zeros(cam.shape)
    for i, f in enumerate(scene.surfaces):
        m = hits.surface_id == i
        if m.any():
            shade = 0.35 + 0.65 * abs(float(f.normal @ scene.light))
            image[m] = f.albedo(hits.s[m], hits.t[m]) * shade
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    hit = hits.surface_id >= 0
    valid = hit & ~_hole_mask(rng, hit, cfg.hole_fraction)
    return CameraView(cam, image, hits.depth.copy(), valid, hits.surface_id.copy())


def compute_overlap(hits_a: RayHits, cam_b: Camera) -> float:
    """Fraction of A's surface-hitting pixels whose 3D point projects inside B with positive depth."""
    hit = hits_a.surface_id >= 0
    if not hit.any():
        return 0.0
    proj = project(hits_a.points[hit], cam_b)
    lands = proj.valid & in_image(proj.xy, cam_b.shape)
    return float(lands.mean())


def visible_tracks(scene: Scene, view: CameraView, hits: RayHits, rel_tol: float = 1e-6) -> np.ndarray:
    """Track points inside the image, in front of the camera, and not occluded."""
    proj = project(scene.points3d, view)
    inside = proj.valid & in_image(proj.xy, view.shape)
    vis = np.zeros(len(scene.points3d), dtype=bool)
    if inside.any():
        idx = np.flatnonzero(inside)
        # exact occlusion test: cast the track's own ray and compare first-hit depth
        vis[idx] = _unoccluded(scene, view.camera, scene.points3d[idx], proj.depth[idx], rel_tol)
    return vis


def _unoccluded(scene: Scene, cam: Camera, points, z, rel_tol) -> np.ndarray:
    c = cam.center
    dirs = (points - c) / z[:, None]  # ray parameterised by camera z
    best = np.full(len(points), np.inf)
    for f in scene.surfaces:
        nrm = f.normal
        denom = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((f.origin - c) @ nrm) / denom
        p = c + lam[:, None] * dirs
        rel = p - f.origin
        s, t = rel @ f.u, rel @ f.v
        eps = 1e-9
        hit = (np.abs(denom) > 1e-12) & (lam > 1e-9) & (s >= -eps) & (s <= f.size_u + eps) & (t >= -eps) & (t <= f.size_v + eps)
        best = np.where(hit & (lam < best), lam, best)
    return best >= z * (1 - rel_tol) - 1e-9


def make_pair(scene: Scene, cam_a: Camera, cam_b: Camera, seed: int,
              hits_a: RayHits | None = None, hits_b: RayHits | None = None) -> TwoViewPair:
    """Render both views and keep the tracks visible in both."""
    rng = np.random.default_rng([int(seed), 1])
    hits_a = hits_a if hits_a is not None else cast_rays(scene, cam_a)
    hits_b = hits_b if hits_b is not None else cast_rays(scene, cam_b)
    view_a = render_view(scene, cam_a, rng, hits_a)
    view_b = render_view(scene, cam_b, rng, hits_b)
    vis_a = visible_tracks(scene, view_a, hits_a)
    vis_b = visible_tracks(scene, view_b, hits_b)
    both = vis_a & vis_b
    tracks = TrackSet(scene.points3d[both], vis_a[both], vis_b[both])
    overlap = compute_overlap(hits_a, cam_b)
    return TwoViewPair(view_a, view_b, tracks, overlap,
                       meta={"scene_seed": scene.seed, "pair_seed": int(seed)})


def sample_pair(scene: Scene, min_overlap: float, max_overlap: float, seed: int,
                max_attempts: int | None = None, propose=None) -> TwoViewPair:
    """Sample two cameras whose overlap falls in ``[min_overlap, max_overlap]``.

    ``propose(rng) -> (Camera, Camera)`` replaces the default random camera
    proposal when given.
    """
    if not 0 <= min_overlap <= max_overlap <= 1:
        raise ConfigError(f"need 0 <= min_overlap <= max_overlap <= 1, got {min_overlap}, {max_overlap}")
    attempts = max_attempts or scene.config.max_attempts
    rng = np.random.default_rng([int(seed), 0])
    for _ in range(attempts):
        if propose is None:
            cam_a, cam_b = random_camera(rng, scene.config), random_camera(rng, scene.config)
        else:
            cam_a, cam_b = propose(rng)
        hits_a = cast_rays(scene, cam_a)
        ov = compute_overlap(hits_a, cam_b)
        if min_overlap <= ov <= max_overlap:
            return make_pair(scene, cam_a, cam_b, seed, hits_a=hits_a)
    raise SamplingExhausted(attempts, min_overlap, max_overlap)
