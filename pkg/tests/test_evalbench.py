import math

import numpy as np
import pytest
import torch

import oracles
from kptrain.detector import ScoreNet, predict
from kptrain.evalbench import (
    EvalConfig,
    InsufficientMatches,
    MatchSet,
    MetricsReport,
    PoseEstimate,
    RansacConfig,
    auc,
    estimate_pose,
    estimate_relative_pose,
    evaluate_detector,
    maa,
    oracle_match,
    pose_error,
    repeatability,
    rotation_angle_deg,
)
from kptrain.geometry import Warp, pixel_to_normalized, warp_point
from kptrain.sampler import KeypointSet, SampleConfig, sample_keypoints
from kptrain.targets import base_prior, smooth

K = (120.0, 120.0, 63.5, 63.5)


def synthetic_two_view(rng, n=60, rot_deg=10.0, noise=0.0):
    """Random points seen by camera A = [I|0] and a rotated, translated camera B."""
    R = oracles.axis_angle(rng.normal(size=3), rot_deg)
    t = np.array([1.0, 0.2, 0.1]) + rng.normal(0, 0.1, 3)
    X = np.stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(4, 9, n)], axis=1)
    Xb = X @ R.T + t
    fx, fy, cx, cy = K
    xa = np.stack([fx * X[:, 0] / X[:, 2] + cx, fy * X[:, 1] / X[:, 2] + cy], axis=1)
    xb = np.stack([fx * Xb[:, 0] / Xb[:, 2] + cx, fy * Xb[:, 1] / Xb[:, 2] + cy], axis=1)
    return xa + rng.normal(0, noise, xa.shape), xb + rng.normal(0, noise, xb.shape), (R, t)


def _kps(xy, shape):
    return KeypointSet(pixel_to_normalized(np.asarray(xy, float), shape), np.ones(len(xy)), shape)


# --- matching and repeatability -------------------------------------------------

def _brute_repeatability(pa, pb, pair, eps):
    rates = []
    for src, dst, w in ((pa, pb, Warp(pair.view_a, pair.view_b)), (pb, pa, Warp(pair.view_b, pair.view_a))):
        res = [warp_point(float(x), float(y), w) for x, y in src]
        valid = [r.valid for r in res]
        if not any(valid):
            continue
        warped = [tuple(r.xy) for r in res]
        m = oracles.mutual_nn_pairs(warped, valid, [tuple(q) for q in dst], eps)
        rates.append(len(m) / sum(valid))
    return float(np.mean(rates))


def test_repeatability_matches_brute_force(small_pair, rng):
    shape = small_pair.view_a.shape
    for eps in (1.0, 2.0, 3.0):
        pa = rng.uniform(0, 63, (80, 2))
        pb = rng.uniform(0, 63, (80, 2))
        got = repeatability(_kps(pa, shape), _kps(pb, shape), Warp(small_pair.view_a, small_pair.view_b), eps)
        assert got == pytest.approx(_brute_repeatability(pa, pb, small_pair, eps), abs=1e-12)


def test_repeatability_perfect_when_keypoints_correspond(small_pair, rng):
    w = Warp(small_pair.view_a, small_pair.view_b)
    pa = rng.uniform(2, 61, (300, 2))
    res = [warp_point(float(x), float(y), w) for x, y in pa]
    # keep points that are co-visible in both directions and mutually well separated
    keep = [i for i, r in enumerate(res) if r.valid and warp_point(*r.xy, w.inverse()).valid]
    pa = pa[keep][:40]
    pb = np.array([res[i].xy for i in keep][:40])
    d = np.linalg.norm(pb[:, None] - pb[None], axis=-1) + np.eye(len(pb)) * 99
    da = np.linalg.norm(pa[:, None] - pa[None], axis=-1) + np.eye(len(pa)) * 99
    sep = (d.min(1) > 5) & (da.min(1) > 5)
    rep = repeatability(_kps(pa[sep], (64, 64)), _kps(pb[sep], (64, 64)), w, 2.0)
    assert rep == pytest.approx(1.0)


def test_repeatability_invalid_epsilon(small_pair):
    with pytest.raises(ValueError):
        repeatability(np.zeros((1, 2)), np.zeros((1, 2)), Warp(small_pair.view_a, small_pair.view_b), 0.0)


def test_oracle_match_matches_brute_force(small_pair, rng):
    w = Warp(small_pair.view_a, small_pair.view_b)
    pa = rng.uniform(0, 63, (120, 2))
    pb = rng.uniform(0, 63, (120, 2))
    m = oracle_match(pa, pb, w, 2.0)
    res = [warp_point(float(x), float(y), w) for x, y in pa]
    exp = oracles.mutual_nn_pairs([tuple(r.xy) for r in res], [r.valid for r in res], [tuple(q) for q in pb], 2.0)
    assert sorted(zip(m.idx_a.tolist(), m.idx_b.tolist())) == sorted(exp)
    assert np.all(m.residual < 2.0)
    assert len(oracle_match(pa, pb, w, 0.0)) == 0


# --- relative pose ---------------------------------------------------------------

def test_noiseless_pose_is_exact(rng):
    for _ in range(10):
        xa, xb, gt = synthetic_two_view(rng)
        est = estimate_relative_pose(xa, xb, K, K)
        assert not est.degenerate
        assert pose_error(est, gt) < 0.1
        assert est.inliers.all()


def test_fewer_than_eight_matches_raise(rng):
    xa, xb, _ = synthetic_two_view(rng, n=7)
    with pytest.raises(InsufficientMatches):
        estimate_relative_pose(xa, xb, K, K)
    with pytest.raises(InsufficientMatches):
        estimate_pose(MatchSet(np.arange(7), np.arange(7), np.zeros(7)), xa, xb, K, K)


def test_pose_robust_to_outliers(rng):
    ok = 0
    trials = 20
    for i in range(trials):
        xa, xb, gt = synthetic_two_view(rng, n=100, noise=0.02)
        bad = rng.choice(100, 30, replace=False)
        xb[bad] = rng.uniform(0, 127, (30, 2))
        est = estimate_relative_pose(xa, xb, K, K, RansacConfig(seed=i))
        ok += (not est.degenerate) and pose_error(est, gt) < 1.0
    assert ok >= 0.95 * trials


def test_pose_invariant_to_match_order(rng):
    xa, xb, gt = synthetic_two_view(rng, n=80, noise=0.05)
    xb[:20] = rng.uniform(0, 127, (20, 2))
    ref = estimate_relative_pose(xa, xb, K, K)
    for _ in range(3):
        p = rng.permutation(80)
        est = estimate_relative_pose(xa[p], xb[p], K, K)
        assert np.allclose(est.R, ref.R) and np.allclose(est.t, ref.t)
        assert np.array_equal(est.inliers, ref.inliers[p])


def test_pose_invariant_to_pixel_scale(rng):
    xa, xb, gt = synthetic_two_view(rng, n=60)
    s = 2.0
    Ks = (K[0] * s, K[1] * s, K[2] * s, K[3] * s)
    e1 = estimate_relative_pose(xa, xb, K, K)
    e2 = estimate_relative_pose(xa * s, xb * s, Ks, Ks)
    assert abs(pose_error(e1, gt) - pose_error(e2, gt)) < 1e-6


def test_pose_error_matches_quaternion_oracle(rng):
    for _ in range(100):
        R1, R2 = oracles.random_rotation(rng), oracles.random_rotation(rng)
        assert rotation_angle_deg(R1, R2) == pytest.approx(oracles.quaternion_angle_deg(R1, R2), abs=1e-6)
    # near 0 and near 180 degrees
    for deg in (1e-5, 179.9999, 180.0):
        R = oracles.axis_angle([0.3, -1, 0.2], deg)
        assert rotation_angle_deg(np.eye(3), R) == pytest.approx(deg, abs=1e-6)


def test_pose_error_ten_degree_case():
    gt = (np.eye(3), np.array([1.0, 0, 0]))
    est = PoseEstimate(oracles.axis_angle([0, 0, 1], 10.0), np.array([1.0, 0, 0]), np.ones(8, bool))
    assert pose_error(est, gt) == pytest.approx(10.0)
    # translation direction is sign-agnostic; max over the two parts
    est = PoseEstimate(np.eye(3), -np.array([math.cos(0.1), math.sin(0.1), 0]), np.ones(8, bool))
    assert pose_error(est, gt) == pytest.approx(math.degrees(0.1))


# --- aggregate metrics -----------------------------------------------------------

def test_auc_reference_value():
    assert auc([1, 3, 7, math.inf], [5])[0] == pytest.approx(0.375)


def test_auc_matches_trapezoid_oracle(rng):
    for _ in range(50):
        n = rng.integers(1, 40)
        e = rng.exponential(8, n)
        e[rng.random(n) < 0.2] = math.inf
        got = auc(e, (5.0, 10.0, 20.0))
        exp = [oracles.trapezoid_auc(list(e), T) for T in (5.0, 10.0, 20.0)]
        assert np.allclose(got, exp, atol=1e-12)
    assert auc([0, 0], [5])[0] == pytest.approx(1.0)
    assert auc([math.inf], [5])[0] == 0.0
    with pytest.raises(ValueError):
        auc([], [5])


def test_auc_permutation_invariant(rng):
    e = rng.exponential(6, 30)
    assert auc(e) == auc(rng.permutation(e))


def test_maa_reference_value():
    assert maa([0.5, 5.5]) == pytest.approx(0.75)
    assert maa([1.0]) == pytest.approx(0.9)  # strict inequality at the threshold
    assert maa([math.inf]) == 0.0


# --- detector evaluation ---------------------------------------------------------

def _uniform(view):
    return np.full(view.shape, 1.0 / view.image.size)


def test_evaluate_deterministic_and_serializable(small_pair, tmp_path):
    cfg = SampleConfig(budget=200)
    r1 = evaluate_detector(lambda v: smooth(np.abs(np.gradient(v.image)[0]) + 1e-6, 1.0), [small_pair] * 2, cfg)
    r2 = evaluate_detector(lambda v: smooth(np.abs(np.gradient(v.image)[0]) + 1e-6, 1.0), [small_pair] * 2, cfg)
    assert r1.to_dict() == r2.to_dict()
    r1.save(tmp_path / "m.json")
    back = MetricsReport.load(tmp_path / "m.json")
    assert back.auc == r1.auc and back.maa == r1.maa


def test_budget_one_gives_zero_auc(small_pair):
    rep = evaluate_detector(_uniform, [small_pair], SampleConfig(budget=1))
    assert all(v == 0.0 for v in rep.auc.values())
    assert rep.per_pair[0]["status"] == "insufficient_matches"


def test_prior_detector_beats_untrained(pair128):
    """A map built from the ground-truth tracks must beat a random-init network."""
    lookup = {id(pair128.view_a): "a", id(pair128.view_b): "b"}
    prior_fn = lambda v: smooth(base_prior(pair128, lookup[id(v)]), 1.0) + 1e-12  # noqa: E731
    torch.manual_seed(0)
    net = ScoreNet()
    cfg = SampleConfig(budget=500)
    good = evaluate_detector(prior_fn, [pair128], cfg, EvalConfig())
    bad = evaluate_detector(lambda v: predict(net, v.image), [pair128], cfg, EvalConfig())
    assert good.repeatability > bad.repeatability
    assert good.per_pair[0]["n_matches"] > bad.per_pair[0]["n_matches"]


def test_sampled_keypoints_roundtrip_through_match(small_pair):
    # identical keypoint sets on an identity warp all match with zero residual
    p = np.random.default_rng(0).random(small_pair.view_a.shape)
    k = sample_keypoints(p, SampleConfig(budget=50, subpixel=False))
    m = oracle_match(k, k, Warp(small_pair.view_a, small_pair.view_a))
    valid = small_pair.view_a.valid[k.pixels()[:, 1].round().astype(int), k.pixels()[:, 0].round().astype(int)]
    assert len(m) == valid.sum() and np.allclose(m.residual, 0, atol=1e-9)
