import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from talkfield.errors import DegenerateLandmarksError, KeypointsRequiredError
from talkfield.facerep import (
    MotionParams,
    ResidualDecoder,
    apply_warp,
    build_warp,
    extract_motion,
    face_mask,
    lift,
    replace_face,
    similarity_align,
    stitch_keypoints,
    synthesize,
    transform_keypoints,
)
from talkfield.renderer import Camera, Frame
from talkfield.toyscene import ToyScene, fit_toy_keypoints, toy_ground_truth
from talkfield.trainer import metric_lmd


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def frame(img, kp=None):
    return Frame(np.asarray(img, float), 0, {}, kp)


# motion --------------------------------------------------------------------


def test_self_alignment(rng):
    kp = rng.uniform(0.2, 0.8, size=(68, 2))
    m = extract_motion(frame(np.zeros((4, 4, 3))), frame(np.zeros((4, 4, 3))), kp, kp)
    assert abs(m.scale - 1) < 1e-12 and np.allclose(m.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(m.translation, 0, atol=1e-12) and np.allclose(m.deltas, 0, atol=1e-12)


def test_pure_scale(rng):
    ref = rng.uniform(0.3, 0.7, size=(20, 2))
    c = ref.mean(axis=0)
    src = c + 2 * (ref - c)
    m = extract_motion(frame(np.zeros((2, 2, 3))), frame(np.zeros((2, 2, 3))), src, ref)
    assert abs(m.scale - 2) < 1e-9 and np.allclose(m.rotation, np.eye(3), atol=1e-9)
    assert np.max(np.abs(m.deltas)) < 1e-9


def test_procrustes_round_trip_500_trials():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(500):
        x = rng.normal(size=(int(rng.integers(4, 70)), 3))
        s, R, t = rng.uniform(0.2, 5), random_rotation(rng), rng.normal(size=3)
        s2, R2, t2 = similarity_align(x, s * x @ R.T + t)
        worst = max(worst, abs(s2 - s), np.max(np.abs(R2 - R)), np.max(np.abs(t2 - t)))
    assert worst < 1e-8


def test_planar_procrustes_recovers_rotation(rng):
    x = rng.normal(size=(30, 2))
    R = oracles.rotation_2d(0.7)
    s, R2, t = similarity_align(x, 1.5 * lift(x) @ R.T + [0.1, -0.2, 0])
    assert abs(s - 1.5) < 1e-12 and np.max(np.abs(R2 - R)) < 1e-12


def test_identity_transform_projects_canonical(rng):
    kp = rng.uniform(size=(68, 2))
    x, n = transform_keypoints(MotionParams.identity(kp))
    assert np.array_equal(x, kp) and n == 0


def test_translation_shifts_u(rng):
    kp = rng.uniform(0.1, 0.8, size=(10, 2))
    m = MotionParams(1.0, np.eye(3), [0.1, 0, 0], np.zeros((10, 3)), lift(kp))
    x, _ = transform_keypoints(m)
    assert np.allclose(x[:, 0], kp[:, 0] + 0.1, atol=1e-15) and np.array_equal(x[:, 1], kp[:, 1])


def test_transform_matches_scratch(rng):
    for _ in range(20):
        L = 15
        m = MotionParams(rng.uniform(0.5, 1.5), random_rotation(rng), rng.normal(scale=0.1, size=3),
                         rng.normal(scale=0.05, size=(L, 3)), rng.uniform(size=(L, 3)))
        want = np.array([m.scale * m.rotation @ (c + d) + m.translation for c, d in zip(m.canonical, m.deltas)])
        uv = want[:, :2]
        got, n = transform_keypoints(m)
        assert np.max(np.abs(got - np.clip(uv, 0, 1))) < 1e-14
        assert n == np.count_nonzero(np.any((uv < 0) | (uv > 1), axis=1))


def test_motion_validation(rng):
    with pytest.raises(ValueError, match="orthonormal"):
        MotionParams(1.0, 2 * np.eye(3), np.zeros(3), np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="positive"):
        MotionParams(0.0, np.eye(3), np.zeros(3), np.zeros((3, 3)), np.zeros((3, 3)))


def test_degenerate_landmarks():
    line = np.column_stack([np.linspace(0, 1, 10), np.full(10, 0.5)])
    with pytest.raises(DegenerateLandmarksError, match="degenerate landmarks"):
        similarity_align(line, line)


def test_keypoints_required():
    with pytest.raises(KeypointsRequiredError, match="keypoints required"):
        extract_motion(frame(np.zeros((2, 2, 3))), frame(np.zeros((2, 2, 3))))


# stitching and mask --------------------------------------------------------


def test_stitch_extremes_and_midpoint(rng):
    xp, xr = rng.uniform(size=(12, 2)), rng.uniform(size=(12, 2))
    assert np.array_equal(stitch_keypoints(xp, xr, np.ones((16, 16))), xp)
    assert np.array_equal(stitch_keypoints(xp, xr, np.zeros((16, 16))), xr)
    assert np.allclose(stitch_keypoints(xp, xr, np.full((16, 16), 0.5)), 0.5 * (xp + xr), atol=1e-15)


def test_face_mask_range_and_shape(rng):
    kp = rng.uniform(0.3, 0.7, size=(68, 2))
    m = face_mask(kp, 40, 50)
    assert m.shape == (40, 50) and m.min() >= 0 and m.max() <= 1
    assert m[20, 25] == 1.0 and m[0, 0] == 0.0


# warping -------------------------------------------------------------------


def test_identity_warp_is_zero(rng):
    kp = rng.uniform(size=(10, 2))
    assert not np.any(build_warp(kp, kp, 12, 9))


def test_constant_displacement_exact(rng):
    # dyadic coordinates keep (kp + v) - kp exact in floating point
    kp = np.round(rng.uniform(size=(20, 2)) * 64) / 64
    v = np.array([0.0625, -0.125])
    f = build_warp(kp, kp + v, 16, 32)
    assert np.all(f == v * (32, 16))


def test_single_pair_displacement_everywhere():
    f = build_warp([[0.1, 0.1]], [[0.3, 0.2]], 20, 20, bandwidth=0.5)
    assert np.allclose(f, [4.0, 2.0], rtol=0, atol=1e-12)


def test_warp_translation_coherence(rng):
    h = w = 64
    bw = 3.0
    src = rng.uniform(0.4, 0.6, size=(8, 2))
    dst = src + rng.normal(scale=0.02, size=(8, 2))
    shift = np.array([5, 3])
    a = build_warp(src, dst, h, w, bw)
    b = build_warp(src + shift / (w, h), dst + shift / (w, h), h, w, bw)
    m = int(3 * bw) + 1
    inner = a[m : h - m - shift[1], m : w - m - shift[0]]
    moved = b[m + shift[1] : h - m, m + shift[0] : w - m]
    assert np.max(np.abs(inner - moved)) < 1e-9


def test_zero_field_bit_identical(rng):
    f = frame(rng.uniform(size=(7, 9, 3)))
    assert np.array_equal(apply_warp(f, np.zeros((7, 9, 2))).image, f.image)


def test_integer_shift_moves_edge():
    img = np.zeros((6, 10, 3))
    img[:, 5:] = 1.0
    field = np.zeros((6, 10, 2))
    field[..., 0] = 1.0
    out = apply_warp(frame(img), field).image
    want = np.zeros_like(img)
    want[:, 6:] = 1.0
    assert np.array_equal(out, want)


def test_warp_matches_bruteforce(rng):
    h, w = 12, 15
    img = rng.uniform(size=(h, w, 3))
    ys, xs = np.mgrid[0:h, 0:w]
    field = np.stack([2 * np.sin(ys / 4.0) + 0.3, 1.5 * np.cos(xs / 5.0) - 0.2], axis=-1)
    got = apply_warp(frame(img), field).image
    assert np.max(np.abs(got - oracles.bilinear_resample(img, field))) < 1e-12


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_warp_values_within_input_range(dx, dy):
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    out = apply_warp(frame(img), np.full((8, 8, 2), (dx, dy))).image
    assert out.min() >= img.min() - 1e-15 and out.max() <= img.max() + 1e-15


# synthesis -----------------------------------------------------------------


def test_full_pass_through(rng):
    o = frame(rng.uniform(size=(10, 10, 3)))
    ref = frame(rng.uniform(size=(10, 10, 3)))
    kp = rng.uniform(0.2, 0.8, size=(12, 2))
    dec = ResidualDecoder.identity(rng)
    out = synthesize(o, ref, kp, kp, dec, np.ones((10, 10)))
    assert np.array_equal(out.image, o.image)
    x_p, _ = transform_keypoints(MotionParams.identity(kp))
    assert np.array_equal(synthesize(o, ref, x_p, kp, dec, np.ones((10, 10))).image, o.image)


def test_zero_mask_gives_reference(rng):
    o, ref = frame(rng.uniform(size=(8, 8, 3))), frame(rng.uniform(size=(8, 8, 3)))
    kp = rng.uniform(0.2, 0.8, size=(5, 2))
    out = synthesize(o, ref, kp + 0.01, kp, ResidualDecoder.identity(rng), np.zeros((8, 8)))
    assert np.array_equal(out.image, ref.image)


def test_mouth_open_transfer_reduces_lmd():
    scene = ToyScene()
    cam = Camera.orbit(0, 0, height=64, width=64)
    ref, kp_ref = toy_ground_truth(scene, cam, 0.0, 0.0, 128)
    drive, kp_open = toy_ground_truth(scene, cam, 1.0, 0.0, 128)
    out = replace_face(drive, ref, ResidualDecoder.identity(np.random.default_rng(0)))
    fit_out, _, _ = fit_toy_keypoints(out, scene, cam, 128)
    fit_ref, _, _ = fit_toy_keypoints(ref, scene, cam, 128)
    assert metric_lmd(fit_out, kp_open, 64, 64) < metric_lmd(fit_ref, kp_open, 64, 64)
