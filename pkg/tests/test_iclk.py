import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maptrack import se3
from maptrack.camera import CameraModel
from maptrack.eval import epe
from maptrack.features import FeaturePyramid, build_pyramid, save_weights
from maptrack.iclk import (
    AlignConfig,
    DegenerateSystemError,
    NormalEquationsWorkspace,
    align,
    huber_weights,
    level_cameras,
    level_schedule,
    lm_step,
    precompute_level,
    projection_jacobian,
    robust_weights,
    warp,
    warp_points,
)
from maptrack.renderer import render, tilted_pose
from maptrack.se3 import PoseSE3, TwistSE3


def _twist(v):
    return se3.exp(TwistSE3.from_vector(np.asarray(v, float)))


@pytest.mark.parametrize("total,expected", [(20, [5, 5, 5, 5]), (50, [13, 13, 12, 12]), (7, [2, 2, 2, 1]),
                                            (1, [1, 0, 0, 0])])
def test_level_schedule(total, expected):
    assert level_schedule(total) == expected


def test_level_cameras(cam):
    cams = level_cameras(cam)
    assert [(c.width, c.height) for c in cams] == [(752, 480), (376, 240), (188, 120), (94, 60)]
    assert cams[3].fx == 50.0
    assert cams[1].cx == pytest.approx((376 + 0.5) / 2 - 0.5)
    assert cams[2].cy == pytest.approx((240 + 0.5) / 4 - 0.5)


def test_config_validation():
    for kwargs in (dict(max_iterations=0), dict(damping=-1.0), dict(weighting="cauchy"),
                   dict(weighting="external"), dict(encoder="cnn"), dict(huber_c=0.0)):
        with pytest.raises(ValueError):
            AlignConfig(**kwargs)


def test_principal_point_jacobian(cam):
    J = projection_jacobian(cam, np.array([[0.0, 0.0, 50.0]]))[0]
    assert J[0, 0] == cam.fx / 50.0 and J[1, 1] == cam.fy / 50.0
    # rotation about y shifts the principal point along u by fx
    assert J[0, 4] == pytest.approx(cam.fx)
    assert J[1, 3] == pytest.approx(-cam.fy)


def _smooth_scene(rng, cam, C=3):
    """Bilinear feature fields (exactly reproduced by bilinear sampling and
    central differences) over a smooth tilted depth surface."""
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    coef = rng.normal(size=(C, 4)) * [1.0, 0.02, 0.02, 1e-4]
    feats = np.stack([a + b * u + c * v + d * u * v for a, b, c, d in coef])
    depth = 80.0 + 0.03 * (u - cam.cx) - 0.02 * (v - cam.cy) + 2.0 * np.sin(u / 150.0) * np.cos(v / 120.0)
    return feats, depth


def test_jacobian_matches_finite_differences(cam):
    rng = np.random.default_rng(42)
    feats, depth = _smooth_scene(rng, cam)
    ref = precompute_level(feats, depth, np.ones(depth.shape, bool), cam)
    pick = rng.choice(ref.n_pixels, 100, replace=False)
    pts = ref.points[pick]
    h = 1e-5
    fd = np.zeros((100, 3, 6))
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        # sampling the reference at pi(exp(xi) p), i.e. warp with T = exp(xi)^-1
        plus, ok1 = warp_points(feats, se3.inverse(_twist(e)), pts, cam)
        minus, ok2 = warp_points(feats, se3.inverse(_twist(-e)), pts, cam)
        assert ok1.all() and ok2.all()
        fd[:, :, k] = (plus - minus) / (2 * h)
    an = ref.jacobian[pick]
    scale = np.abs(fd).max(axis=(0, 1))
    assert np.all(scale > 0)
    assert np.all(np.abs(an - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-3 * scale))


def test_all_invalid_depth_raises(cam):
    with pytest.raises(DegenerateSystemError):
        precompute_level(np.zeros((3, 480, 752)), np.full((480, 752), np.inf), np.zeros((480, 752), bool), cam)


def test_warp_identity(cam):
    feats, depth = _smooth_scene(np.random.default_rng(0), cam)
    warped, mask = warp(feats, PoseSE3.identity(), depth, cam)
    assert mask[1:-1, 1:-1].all()
    assert np.abs(warped[:, mask] - feats[:, mask]).max() <= 1e-6


def test_warp_forward_translation_scales(cam):
    z, dz = 100.0, 20.0
    depth = np.full((cam.height, cam.width), z)
    u = np.tile(np.arange(cam.width, dtype=float), (cam.height, 1))
    # camera 1 sits dz closer to the plane
    T = PoseSE3(np.eye(3), np.array([0.0, 0.0, dz]))
    warped, mask = warp(u, T, depth, cam)
    r, c = int(cam.cy), int(cam.cx) + 100
    assert mask[r, c]
    assert warped[0, r, c] == pytest.approx(cam.cx + 100 * z / (z - dz), abs=1e-9)
    assert not mask[0, 0]   # corners leave the query image


def test_warp_behind_camera(cam):
    depth = np.full((cam.height, cam.width), 10.0)
    T = PoseSE3(np.eye(3), np.array([0.0, 0.0, 50.0]))
    _, mask = warp(np.zeros((cam.height, cam.width)), T, depth, cam)
    assert not mask.any()


def test_uniform_weights():
    r = np.random.default_rng(0).normal(size=(50, 3))
    assert np.all(robust_weights(r, "uniform") == 1.0)


def test_huber_equal_residuals():
    assert np.all(huber_weights(np.full(40, -2.5)) == 1.0)


def test_huber_outlier():
    rng = np.random.default_rng(3)
    r = rng.choice([-1.0, 1.0], 101) * rng.uniform(0.5, 1.5, 101)
    s = 1.4826 * np.median(np.abs(r))
    r[0] = 100 * s
    s = 1.4826 * np.median(np.abs(r))
    w = huber_weights(r)
    assert w[0] < 0.02
    assert w[0] == pytest.approx(1.345 * s / abs(r[0]))
    assert np.all(w[1:][np.abs(r[1:]) <= 1.345 * s] == 1.0)


def test_huber_scale_per_channel():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(500, 2)) * [1.0, 100.0]
    w = huber_weights(r)
    # same relative outlier fraction in each channel despite the unit gap
    frac = (w < 1).mean(axis=0)
    assert abs(frac[0] - frac[1]) < 0.08
    np.testing.assert_array_equal(w[:, 1], huber_weights(r[:, 1]))


def test_external_weights():
    r = np.ones((4, 3))
    w = robust_weights(r, "external", external=np.array([0.0, 1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(w, np.repeat([[0.0], [1.0], [2.0], [3.0]], 3, axis=1))
    with pytest.raises(ValueError, match="entries"):
        robust_weights(r, "external", external=np.ones(5))
    with pytest.raises(DegenerateSystemError):
        robust_weights(r, "external", external=np.zeros(4))
    with pytest.raises(ValueError):
        robust_weights(r, "external", external=-np.ones(4))
    with pytest.raises(ValueError):
        robust_weights(r, "tukey")


def test_lm_step_identity_system():
    r = np.eye(6)[0]
    dxi = lm_step(NormalEquationsWorkspace(np.eye(6), r, np.ones(6), 0.0)).vector()
    np.testing.assert_allclose(dxi, r, atol=1e-15)
    dxi = lm_step(NormalEquationsWorkspace(np.eye(6), r, np.ones(6), 1e-6)).vector()
    np.testing.assert_allclose(dxi, r / (1 + 1e-6), rtol=1e-15)


def _random_system(seed, m=500):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(m, 6)) * rng.uniform(0.1, 10, 6)
    return J, rng.normal(size=m), rng.uniform(0.1, 2.0, m)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lm_step_dense_oracle(seed):
    J, r, w = _random_system(seed)
    ws = NormalEquationsWorkspace(J, r, w, 1e-6)
    dxi = lm_step(ws).vector()
    H = (J * w[:, None]).T @ J
    g = (J * w[:, None]).T @ r
    A = H + 1e-6 * np.diag(np.diag(H))
    oracle = np.linalg.solve(A, g)
    assert np.linalg.norm(dxi - oracle) <= 1e-8 * np.linalg.norm(oracle)
    assert np.linalg.norm(A @ dxi - g) <= 1e-8 * np.linalg.norm(g)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lm_step_gauss_newton(seed):
    J, r, _ = _random_system(seed)
    dxi = lm_step(NormalEquationsWorkspace(J, r, np.ones(r.size), 0.0)).vector()
    gn, *_ = np.linalg.lstsq(J, r, rcond=None)
    assert np.linalg.norm(dxi - gn) <= 1e-8 * np.linalg.norm(gn)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.5, 2.0, 4.0, 0.125, 1024.0]))
def test_lm_step_weight_scaling(seed, k):
    # power-of-two factors scale every product exactly
    J, r, w = _random_system(seed)
    a = lm_step(NormalEquationsWorkspace(J, r, w, 1e-6)).vector()
    b = lm_step(NormalEquationsWorkspace(J, r, k * w, 1e-6)).vector()
    np.testing.assert_array_equal(a, b)
    c = lm_step(NormalEquationsWorkspace(J, r, math.pi * w, 1e-6)).vector()
    assert np.linalg.norm(c - a) <= 1e-12 * np.linalg.norm(a)


def test_lm_step_degenerate():
    J = np.zeros((20, 6))
    J[:, :5] = np.random.default_rng(0).normal(size=(20, 5))
    with pytest.raises(DegenerateSystemError):
        lm_step(NormalEquationsWorkspace(J, np.ones(20), np.ones(20)))
    # an exactly collinear column is singular without damping
    J[:, 5] = J[:, 0] + J[:, 1]
    with pytest.raises(DegenerateSystemError):
        lm_step(NormalEquationsWorkspace(J, np.ones(20), np.ones(20), 0.0))
    with pytest.raises(DegenerateSystemError):
        lm_step(NormalEquationsWorkspace(np.eye(6)[:5], np.ones(5), np.ones(5)))


# -- full alignment on rendered pairs ---------------------------------------


@pytest.fixture(scope="module")
def pair(scene, cam):
    prior = tilted_pose(*scene["center"], scene["ground"] + 100.0, yaw=0.7, pitch=0.05)
    ref = render(scene["mesh"], prior, cam)
    return dict(prior=prior, ref=ref)


def _query(scene, cam, pair, T):
    return render(scene["mesh"], se3.compose(pair["prior"], T), cam).image


def test_identity_pair_stays_identity(scene, cam, pair):
    ref = pair["ref"]
    res = align(ref.image, ref.depth, ref.image, cam)
    assert res.converged and res.trace
    assert se3.log(res.pose).norm() <= 1e-6


def test_recovers_small_offset(scene, cam, pair):
    T_gt = PoseSE3(se3.rotation_about([0.3, -0.5, 0.8], math.radians(1.0)), np.array([1.2, -1.0, 1.1]))
    assert np.linalg.norm(T_gt.translation) == pytest.approx(1.9, abs=0.05)
    ref = pair["ref"]
    query = _query(scene, cam, pair, T_gt)
    res = align(ref.image, ref.depth, query, cam, config=AlignConfig(max_iterations=50))
    e0 = epe(ref.depth, cam, PoseSE3.identity(), T_gt)
    e1 = epe(ref.depth, cam, res.pose, T_gt)
    assert e0 > 1.5
    assert e1 < 0.1
    assert res.converged
    assert res.valid_pixels > 0.5 * cam.width * cam.height


def test_energy_monotone_same_source(scene, cam, pair):
    T_gt = PoseSE3(se3.rotation_about([0.3, -0.5, 0.8], math.radians(1.0)), np.array([1.2, -1.0, 1.1]))
    ref = pair["ref"]
    res = align(ref.image, ref.depth, _query(scene, cam, pair, T_gt), cam, config=AlignConfig(max_iterations=50))
    coarse = [t.energy for t in res.trace if t.level == 3]
    assert coarse[-1] < 0.1 * coarse[0]
    for level in range(4):
        e = [t.energy for t in res.trace if t.level == level]
        # at the interpolation noise floor the mean energy may wobble by ~1e-5
        assert all(b <= a + 1e-4 * e[0] for a, b in zip(e, e[1:])), (level, e)


def test_same_image_from_perturbed_init(scene, cam, pair):
    # aligning (A, A) from a start inside the basin returns the identity
    ref = pair["ref"]
    init = PoseSE3(se3.rotation_about([0, 0, 1], 0.004), np.array([0.4, -0.3, 0.5]))
    res = align(ref.image, ref.depth, ref.image, cam, init=init,
                config=AlignConfig(max_iterations=200, stop_threshold=1e-10))
    assert se3.log(res.pose).norm() <= 1e-6


def test_textureless_is_degenerate(scene, cam, pair):
    ref = pair["ref"]
    flat = np.full_like(ref.image, 100)
    res = align(flat, ref.depth, flat, cam)
    assert not res.converged
    assert se3.log(res.pose).norm() == 0.0
    assert res.degenerate_levels


def test_no_valid_depth(cam):
    img = np.zeros((cam.height, cam.width, 3), np.uint8)
    res = align(img, np.full((cam.height, cam.width), np.inf), img, cam)
    assert not res.converged and res.trace == []


def test_external_unit_weights_match_uniform(scene, cam, pair, tmp_path):
    T_gt = PoseSE3(np.eye(3), np.array([1.0, 0.0, 0.5]))
    ref = pair["ref"]
    query = _query(scene, cam, pair, T_gt)
    a = align(ref.image, ref.depth, query, cam)
    levels = [np.ones(s.shape) for s in build_pyramid(np.zeros((cam.height, cam.width)))]
    save_weights(tmp_path / "w.wght", levels)
    b = align(ref.image, ref.depth, query, cam, config=AlignConfig(weighting="external",
                                                                   weight_file=str(tmp_path / "w.wght")))
    np.testing.assert_array_equal(a.pose.matrix(), b.pose.matrix())


def test_injected_features(scene, cam, pair):
    ref = pair["ref"]
    from maptrack.iclk import prepare_features
    cfg = AlignConfig()
    rf = prepare_features(ref.image, cfg, np.isfinite(ref.depth))
    qf = prepare_features(ref.image, cfg)
    res = align(None, ref.depth, None, cam, ref_features=rf, query_features=qf)
    assert se3.log(res.pose).norm() <= 1e-6
    with pytest.raises(ValueError, match="channel"):
        align(None, ref.depth, None, cam, ref_features=rf, query_features=FeaturePyramid([l[:1] for l in qf.levels]))


def test_shape_checks(cam):
    img = np.zeros((10, 10, 3), np.uint8)
    with pytest.raises(ValueError):
        align(img, np.ones((12, 10)), img, cam)
    with pytest.raises(ValueError, match="camera"):
        align(img, np.ones((10, 10)), img, cam)
