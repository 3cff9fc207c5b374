import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from kptrain.geometry import (
    Camera,
    CameraView,
    Warp,
    bilinear_sample,
    look_at,
    normalized_to_pixel,
    pixel_grid,
    pixel_to_normalized,
    project,
    relative_pose,
    unproject,
    warp_map,
    warp_point,
    warp_points,
)
from kptrain.scenegen import Rect, Scene, SceneConfig, make_pair

NOHOLES = SceneConfig(image_size=64, hole_fraction=0.0, noise_sigma=0.0)


def two_plane_scene():
    """Large back wall at y=5 and a small panel at y=2 in front of it."""
    tex = np.random.default_rng(0).random((40, 40))
    back = Rect(np.array([-10.0, 5.0, -10.0]), np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), 20.0, 20.0, tex, 0.5)
    front = Rect(np.array([-0.5, 2.0, 0.0]), np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), 1.0, 1.0, tex, 0.025)
    pts = np.array([[0.0, 5.0, 0.5], [0.0, 2.0, 0.5]])
    return Scene(pts, np.array([0, 1]), [back, front], 0, NOHOLES)


def test_project_optical_axis():
    cam = Camera(100.0, 90.0, 31.5, 20.0, np.eye(3), np.zeros(3), 64, 48)
    p = project([[0.0, 0.0, 3.0]], cam)
    assert np.allclose(p.xy[0], [31.5, 20.0]) and p.depth[0] == 3.0 and p.valid[0]


def test_project_behind_camera_invalid():
    cam = Camera(100.0, 100.0, 32, 32, np.eye(3), np.zeros(3), 64, 64)
    p = project([[0.1, 0.2, -1.0], [0.0, 0.0, 0.0]], cam)
    assert not p.valid.any()


def test_project_matches_pinhole_oracle(rng):
    for _ in range(50):
        R = oracles.random_rotation(rng)
        t = rng.normal(size=3)
        fx, fy = rng.uniform(50, 200, 2)
        cx, cy = rng.uniform(0, 64, 2)
        cam = Camera(fx, fy, cx, cy, R, t, 64, 64)
        X = R.T @ (np.array([*rng.normal(size=2), rng.uniform(1, 5)]) - t)
        u, v, z = oracles.pinhole(X, R, t, fx, fy, cx, cy)
        p = project([X], cam)
        assert np.allclose(p.xy[0], [u, v], atol=1e-9, rtol=0) and abs(p.depth[0] - z) < 1e-9


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-0.5, 63.4), y=st.floats(-0.5, 63.4), d=st.floats(0.1, 100))
def test_project_unproject_roundtrip(x, y, d):
    cam = look_at([1, -5, 2], [0, 0, 0.5], 60.0, 60.0, 64, 64)
    X = unproject([[x, y]], [d], cam)
    p = project(X, cam)
    assert np.allclose(p.xy[0], [x, y], atol=1e-7)
    assert p.depth[0] == pytest.approx(d)


def test_normalized_convention():
    shape = (48, 64)
    assert np.allclose(pixel_to_normalized([[-0.5, -0.5], [63.5, 47.5]], shape), [[-1, -1], [1, 1]])
    assert np.allclose(pixel_to_normalized([[0, 0]], shape), [[1 / 64 - 1, 1 / 48 - 1]])
    xy = np.random.default_rng(0).uniform(-0.5, 63, (20, 2))
    assert np.allclose(normalized_to_pixel(pixel_to_normalized(xy, shape), shape), xy, atol=1e-12)


def test_identity_warp(small_pair):
    v = small_pair.view_a
    grid = pixel_grid(v.shape)
    res = warp_points(grid, Warp(v, v))
    valid = v.valid.ravel()
    assert np.array_equal(res.valid, valid)
    assert np.allclose(res.xy[valid], grid[valid], atol=1e-9)
    r = warp_point(10.0, 12.0, Warp(v, v))
    if v.valid[12, 10]:
        assert np.allclose(r.xy, [10, 12])


def test_quarter_roll_permutes_coordinates():
    scene = two_plane_scene()
    a = look_at([0.0, -3.0, 0.7], [0.0, 5.0, 0.7], 50.0, 50.0, 64, 64)
    roll = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    b = Camera(a.fx, a.fy, a.cx, a.cy, roll @ a.R, roll @ a.t, 64, 64)
    pair = make_pair(scene, a, b, seed=0)
    grid = pixel_grid(a.shape)
    res = warp_points(grid, Warp(pair.view_a, pair.view_b))
    assert res.valid.all()
    expected = np.stack([grid[:, 1], 63 - grid[:, 0]], axis=1)
    assert np.allclose(res.xy, expected, atol=1e-9)
    # rotate-image oracle: B's image is A's image turned by np.rot90
    assert np.allclose(np.rot90(pair.view_a.depth), pair.view_b.depth, rtol=1e-12)


def test_occluded_point_flagged():
    scene = two_plane_scene()
    a = look_at([-3.0, -3.0, 0.5], [0.0, 5.0, 0.5], 50.0, 50.0, 64, 64)
    b = look_at([0.0, -3.0, 0.5], [0.0, 5.0, 0.5], 50.0, 50.0, 64, 64)
    pair = make_pair(scene, a, b, seed=0)
    back_pt = scene.points3d[0]
    xy = project([back_pt], pair.view_a).xy[0]
    assert pair.view_a.surface_id[int(round(xy[1])), int(round(xy[0]))] == 0
    r = warp_point(*xy, Warp(pair.view_a, pair.view_b))
    assert r.occluded and not r.valid
    # the panel point is visible from both
    xy2 = project([scene.points3d[1]], pair.view_a).xy[0]
    r2 = warp_point(*xy2, Warp(pair.view_a, pair.view_b))
    assert r2.valid and not r2.occluded


def test_warp_map_identity_full_depth():
    scene = two_plane_scene()
    cam = look_at([0.0, -3.0, 0.5], [0.0, 5.0, 0.5], 50.0, 50.0, 64, 64)
    pair = make_pair(scene, cam, cam, seed=0)
    assert pair.view_a.valid.all()
    m = np.random.default_rng(2).random((64, 64))
    out, mask = warp_map(m, Warp(pair.view_a, pair.view_b))
    assert np.allclose(out, m, atol=1e-12)
    assert mask.min() == 1.0


def test_warp_map_invalid_source_depth(small_pair):
    va = small_pair.view_a
    blind = CameraView(va.camera, va.image, va.depth, np.zeros_like(va.valid), va.surface_id)
    out, mask = warp_map(np.ones(small_pair.view_b.shape), Warp(blind, small_pair.view_b))
    assert not out.any() and not mask.any()


def test_warp_map_shape_mismatch(small_pair):
    with pytest.raises(ValueError):
        warp_map(np.ones((3, 3)), Warp(small_pair.view_a, small_pair.view_b))


def test_warp_map_matches_pointwise_oracle(small_pair, rng):
    w = Warp(small_pair.view_a, small_pair.view_b)
    m = rng.random(small_pair.view_b.shape)
    out, mask = warp_map(m, w)
    h, wd = small_pair.view_a.shape
    for y in range(h):
        for x in range(wd):
            r = warp_point(float(x), float(y), w)
            exp = oracles.bilinear(m, *r.xy) if r.valid else 0.0
            assert mask[y, x] == float(r.valid)
            assert abs(out[y, x] - exp) < 1e-6


def test_warp_map_linear(small_pair, rng):
    w = Warp(small_pair.view_a, small_pair.view_b)
    m1, m2 = rng.random((2, *small_pair.view_b.shape))
    a, b = 0.7, -2.3
    lhs, _ = warp_map(a * m1 + b * m2, w)
    r1, _ = warp_map(m1, w)
    r2, _ = warp_map(m2, w)
    assert np.allclose(lhs, a * r1 + b * r2, atol=1e-6)


def test_warp_round_trip(pair128):
    va, vb = pair128.view_a, pair128.view_b
    w = Warp(va, vb)
    grid = pixel_grid(va.shape)
    fwd = warp_points(grid, w)
    land = fwd.xy[fwd.valid]
    # co-visible landings away from depth edges: the 4 neighbours in B lie on the source surface
    x0 = np.clip(np.floor(land[:, 0]).astype(int), 0, vb.shape[1] - 1)
    y0 = np.clip(np.floor(land[:, 1]).astype(int), 0, vb.shape[0] - 1)
    x1, y1 = np.minimum(x0 + 1, vb.shape[1] - 1), np.minimum(y0 + 1, vb.shape[0] - 1)
    src_sid = va.surface_id.ravel()[fwd.valid]
    clean = np.ones(len(land), dtype=bool)
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        clean &= vb.valid[yy, xx] & (vb.surface_id[yy, xx] == src_sid)
    assert clean.sum() > 5000
    back = warp_points(land[clean], w.inverse())
    assert back.valid.all()
    err = np.linalg.norm(back.xy - grid[fwd.valid][clean], axis=1)
    assert err.max() < 0.05


def test_relative_pose_maps_camera_frames(small_pair, rng):
    R, t = relative_pose(small_pair.view_a, small_pair.view_b)
    X = rng.normal(size=(5, 3))
    ca, cb = small_pair.view_a.camera, small_pair.view_b.camera
    assert np.allclose((X @ ca.R.T + ca.t) @ R.T + t, X @ cb.R.T + cb.t)


def test_bilinear_sample_matches_oracle(rng):
    g = rng.random((7, 9))
    xy = rng.uniform(-1, 10, (100, 2))
    got = bilinear_sample(g, xy)
    exp = [oracles.bilinear(g, x, y) for x, y in xy]
    assert np.allclose(got, exp, atol=1e-12)
