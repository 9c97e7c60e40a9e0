"""Small closed-form examples for every module, runnable without pytest
(``talkfield selftest``)."""

from __future__ import annotations

import math
import tempfile
import traceback
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

CHECKS: list[tuple[str, str, object]] = []


def check(module: str, name: str):
    def wrap(fn):
        CHECKS.append((module, name, fn))
        return fn

    return wrap


@dataclass
class CheckResult:
    module: str
    name: str
    passed: bool
    detail: str = ""


# --------------------------------------------------------------------------
# core-math


@check("core-math", "identity layer passes input through")
def _():
    from .core import Mlp, mlp_eval

    net = Mlp([np.eye(2)], [np.zeros(2)], "identity", "identity")
    return np.array_equal(mlp_eval(net, np.array([3.0, -1.0])), [3.0, -1.0])


@check("core-math", "sigmoid output at zero is 0.5")
def _():
    from .core import Mlp, mlp_eval

    net = Mlp([np.ones((1, 2))], [np.zeros(1)], "relu", "sigmoid")
    return mlp_eval(net, np.zeros(2))[0] == 0.5


@check("core-math", "linear backprop: dW=[[2]], db=[1], dx=(1)")
def _():
    from .core import Mlp, mlp_backprop

    g = mlp_backprop(Mlp([np.eye(1)], [np.zeros(1)]), np.array([2.0]), np.array([1.0]))
    return g.weights[0].tolist() == [[2.0]] and g.biases[0].tolist() == [1.0] and g.input.tolist() == [1.0]


@check("core-math", "sigmoid local derivative 0.25 at zero")
def _():
    from .core import Mlp, mlp_backprop

    g = mlp_backprop(Mlp([np.ones((1, 1))], [np.zeros(1)], "relu", "sigmoid"), np.array([0.0]), np.array([1.0]))
    return g.biases[0][0] == 0.25


@check("core-math", "gradient check of a linear net below 1e-10")
def _():
    from .core import Mlp, check_gradients

    net = Mlp.init([3, 2], np.random.default_rng(0), "identity", "identity")
    return check_gradients(net, np.array([0.3, -0.2, 0.9])).max_rel_error < 1e-10


@check("core-math", "sgd lr=0.1 takes p=1, g=2 to 0.8")
def _():
    from .core import OptimizerState, optimizer_step

    p = {"p": np.array([1.0])}
    optimizer_step(OptimizerState("sgd", 0.1), p, {"p": np.array([2.0])})
    return abs(p["p"][0] - 0.8) < 1e-15


@check("core-math", "first adam step moves p by lr")
def _():
    from .core import OptimizerState, optimizer_step

    p = {"p": np.array([1.0])}
    optimizer_step(OptimizerState("adam", 1e-3, 0.9, 0.999, 1e-8), p, {"p": np.array([1.0])})
    return abs((1.0 - p["p"][0]) - 1e-3) < 1e-10


# --------------------------------------------------------------------------
# triplane


def _grid(resolutions=(4,), feature_dim=2, log2=4):
    from .triplane import TriPlaneGrid

    return TriPlaneGrid.create(resolutions, feature_dim, log2, rng=np.random.default_rng(1))


@check("triplane", "dense index 2 + 3*4 = 14, repeatable")
def _():
    from .triplane import hash_cell

    return hash_cell(16, 4, 2, 3) == 14 and hash_cell(16, 4, 2, 3) == hash_cell(16, 4, 2, 3)


@check("triplane", "interpolation at a vertex returns the entry")
def _():
    from .triplane import plane_encode

    plane = _grid().planes["xy"]
    level = plane.levels[0]
    return np.array_equal(plane_encode(plane, 1 / 3, 2 / 3), level.entries[level.index(1, 2)])


@check("triplane", "zero tables encode to zero")
def _():
    from .triplane import plane_encode, triplane_encode

    g = _grid(feature_dim=1, log2=4)
    g.params[:] = 0.0
    out = triplane_encode(g, 0.1, -0.4, 0.7)
    return out.shape == (3,) and not np.any(out) and not np.any(plane_encode(g.planes["yz"], 0.2, 0.9))


@check("triplane", "concatenation order xy | yz | xz")
def _():
    from .triplane import triplane_encode

    g = _grid(feature_dim=2)
    g.params[:] = 0.0
    g.planes["xy"].levels[0].entries[:] = (1.0, 0.0)
    return triplane_encode(g, 0.3, 0.2, -0.5).tolist() == [1, 0, 0, 0, 0, 0]


@check("triplane", "backprop at a vertex has weight 1, at a cell center 0.25 each")
def _():
    from .triplane import triplane_backprop

    g = _grid(feature_dim=1)
    # bbox [-1,1]: world x=-1/3 maps to u=1/3, vertex 1 at resolution 4
    at_vertex = triplane_backprop(g, (-1 / 3, -1 / 3, -1 / 3), np.ones(3))
    idx, rows = at_vertex[("xy", 0)]
    ok = rows[rows != 0].tolist() == [1.0]
    center = triplane_backprop(g, (-2 / 3, -2 / 3, -2 / 3), np.ones(3))  # u = 1/6, first cell center
    _, rows = center[("yz", 0)]
    return ok and np.allclose(rows.ravel(), 0.25, rtol=0, atol=1e-15) and len(rows) == 4


# --------------------------------------------------------------------------
# conditioning


@check("conditioning", "1 s silence gives 25 equal floor embeddings")
def _():
    from .conditioning import AudioTrack, featurize_audio

    seq = featurize_audio(AudioTrack(np.zeros(16000), 16000), 25.0, 32)
    return len(seq) == 25 and np.all(seq.embeddings == seq.embeddings[0])


@check("conditioning", "2 s at 25 fps gives 50 embeddings")
def _():
    from .conditioning import AudioTrack, featurize_audio

    t = np.arange(32000) / 16000
    return len(featurize_audio(AudioTrack(0.3 * np.sin(2 * np.pi * 220 * t), 16000), 25.0, 32)) == 50


@check("conditioning", "feature file round trip, bad magic, truncation")
def _():
    from .conditioning import AudioEmbeddingSequence, read_feature_file, write_feature_file
    from .errors import BadMagicError, TruncatedPayloadError

    seq = AudioEmbeddingSequence(np.random.default_rng(2).normal(size=(50, 32)).astype(np.float32), 25.0)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "f.lnaf"
        write_feature_file(p, seq)
        ok = np.array_equal(read_feature_file(p).embeddings, seq.embeddings)
        raw = p.read_bytes()
        p.write_bytes(b"XXXX" + raw[4:])
        ok &= _raises(BadMagicError, read_feature_file, p)
        p.write_bytes(raw[: -8 * 32])
        ok &= _raises(TruncatedPayloadError, read_feature_file, p)
    return ok


def _zero_gates(d_a=4):
    from .conditioning import GateNets
    from .core import Mlp

    g = GateNets.init(6, d_a, np.random.default_rng(3))
    for net in (g.mlp_a, g.mlp_b):
        for w in net.weights + net.biases:
            w[...] = 0.0
    return g


@check("conditioning", "zero gate gives 0.5*e_a; zero audio gives 0")
def _():
    from .conditioning import GateNets, condition_audio

    e = np.array([1.0, -2.0, 0.5, 4.0])
    out, v = condition_audio(_zero_gates(), np.ones(6), e)
    live = GateNets.init(6, 4, np.random.default_rng(4))
    zero, _ = condition_audio(live, np.random.default_rng(5).normal(size=6), np.zeros(4))
    return np.array_equal(v, 0.5 * np.ones(4)) and np.array_equal(out, 0.5 * e) and not np.any(zero)


@check("conditioning", "blink 0 gives 0; zero gate at blink 1 gives 0.5")
def _():
    from .conditioning import GateNets, condition_blink

    live = GateNets.init(6, 4, np.random.default_rng(6))
    off, _ = condition_blink(live, np.random.default_rng(7).normal(size=(10, 6)), 0.0)
    half, _ = condition_blink(_zero_gates(), np.ones(6), 1.0)
    return not np.any(off) and half == 0.5


# --------------------------------------------------------------------------
# renderer


def _front_camera(h, w):
    from .renderer import Camera

    return Camera(np.zeros(3), np.eye(3), 1.0 * w, h, w, 0.5, 4.0)


@check("renderer", "center ray of a symmetric image looks down -z; 2x2 gives 4 rays")
def _():
    from .renderer import generate_rays

    rays = generate_rays(_front_camera(3, 3))
    return np.allclose(rays.directions[4], (0, 0, -1), atol=0) and len(generate_rays(_front_camera(2, 2))) == 4


@check("renderer", "uniform depths 1.0..1.8 with delta 0.2; stratified repeatable")
def _():
    from .renderer import generate_rays, sample_ray

    ray = generate_rays(_front_camera(1, 1))[0]
    _, depths, deltas = sample_ray(ray, 1.0, 2.0, 5, "uniform")
    a = sample_ray(ray, 1.0, 2.0, 5, "stratified", seed=9)
    b = sample_ray(ray, 1.0, 2.0, 5, "stratified", seed=9)
    return (np.allclose(depths, [1.0, 1.2, 1.4, 1.6, 1.8], rtol=0, atol=1e-15)
            and np.allclose(deltas, 0.2, rtol=0, atol=1e-15) and all(np.array_equal(x, y) for x, y in zip(a, b)))


@check("renderer", "zero network gives sigma = ln 2 and gray")
def _():
    from .field import RadianceField, query_field

    f = RadianceField.init(6, 4, np.random.default_rng(8))
    for net in f.networks().values():
        for w in net.weights + net.biases:
            w[...] = 0.0
    sigma, rgb = query_field(f, np.ones(6), np.array([0, 0, -1.0]), np.ones(4), 0.3)
    return abs(sigma - math.log(2)) < 1e-15 and np.array_equal(rgb, [0.5, 0.5, 0.5])


@check("renderer", "empty space is background; opaque first red sample is red")
def _():
    from .renderer import SampleBatch, composite_ray

    pos = np.zeros((4, 3))
    empty = SampleBatch(pos, np.full(4, 0.25), np.zeros(4), np.full((4, 3), 0.7))
    bg = (0.2, 0.4, 0.6)
    red = np.tile([0.0, 1.0, 0.0], (4, 1))
    red[0] = (1, 0, 0)
    opaque = SampleBatch(pos, np.full(4, 0.25), np.array([160.0, 0, 0, 0]), red)
    return (np.array_equal(composite_ray(empty, bg), bg)
            and np.allclose(composite_ray(opaque), (1, 0, 0), rtol=0, atol=1e-15))


@check("renderer", "zero-density field renders pure background")
def _():
    from .renderer import render_rays, generate_rays

    rays = generate_rays(_front_camera(3, 4))

    def q(pts, dirs, _):
        return np.zeros(len(pts)), np.full((len(pts), 3), 0.9), 0

    colors, _ = render_rays(q, rays, 0.5, 4.0, 8, background=(0.1, 0.2, 0.3))
    return np.array_equal(colors, np.tile([0.1, 0.2, 0.3], (12, 1)))


@check("renderer", "compositing gradients: single sample and empty-space limit")
def _():
    from .renderer import composite, composite_backprop

    s, c, d = np.array([[0.8]]), np.array([[[0.2, 0.5, 0.9]]]), np.array([[0.5]])
    alpha = -math.expm1(-0.4)
    ok = True
    for k in range(3):
        up = np.zeros((1, 3))
        up[0, k] = 1.0
        _, dc = composite_backprop(composite(s, c, d), s, c, d, up)
        ok &= abs(dc[0, 0, k] - alpha) < 1e-15 and np.count_nonzero(dc) == 1
    rng = np.random.default_rng(10)
    s0, c0, d0, bg = np.zeros((1, 5)), rng.uniform(size=(1, 5, 3)), rng.uniform(0.1, 0.3, (1, 5)), (0.3, 0.1, 0.6)
    up = np.ones((1, 3))
    ds, _ = composite_backprop(composite(s0, c0, d0, bg), s0, c0, d0, up, bg)
    want = d0 * (c0.sum(-1) - sum(bg))
    return ok and np.allclose(ds, want, rtol=0, atol=1e-14)


# --------------------------------------------------------------------------
# facerep


def _landmarks(n=12, seed=11):
    return np.random.default_rng(seed).uniform(0.25, 0.75, size=(n, 2))


@check("facerep", "self alignment is the identity; pure scale 2 is recovered")
def _():
    from .facerep import extract_motion
    from .renderer import Frame

    kp = _landmarks()
    f = Frame(np.zeros((4, 4, 3)))
    m = extract_motion(f, f, kp, kp)
    ok = abs(m.scale - 1) < 1e-12 and np.allclose(m.rotation, np.eye(3), atol=1e-12) and np.allclose(m.translation, 0, atol=1e-12)
    ok &= np.allclose(m.deltas, 0, atol=1e-12)
    mu = kp.mean(axis=0)
    m2 = extract_motion(f, f, mu + 2 * (kp - mu), kp)
    return ok and abs(m2.scale - 2) < 1e-9 and np.allclose(m2.rotation, np.eye(3), atol=1e-9) and np.allclose(m2.deltas, 0, atol=1e-9)


@check("facerep", "identity motion projects canonical points; translation shifts u")
def _():
    from .facerep import MotionParams, transform_keypoints

    kp = _landmarks()
    m = MotionParams.identity(kp)
    x, _ = transform_keypoints(m)
    shifted, _ = transform_keypoints(replace(m, translation=np.array([0.1, 0, 0])))
    return np.array_equal(x, kp) and np.allclose(shifted - x, [0.1, 0], rtol=0, atol=1e-15)


@check("facerep", "stitching: mask 1 keeps x_p, 0 keeps x_ref, 0.5 averages")
def _():
    from .facerep import stitch_keypoints

    a, b = _landmarks(seed=12), _landmarks(seed=13)
    ones, zeros, half = np.ones((8, 8)), np.zeros((8, 8)), np.full((8, 8), 0.5)
    return (np.array_equal(stitch_keypoints(a, b, ones), a) and np.array_equal(stitch_keypoints(a, b, zeros), b)
            and np.allclose(stitch_keypoints(a, b, half), 0.5 * (a + b), rtol=0, atol=1e-15))


@check("facerep", "warp: zero, constant and single-pair fields")
def _():
    from .facerep import apply_warp, build_warp
    from .renderer import Frame

    # dyadic coordinates so that (kp + v) - kp == v holds exactly in floating point
    kp = np.round(_landmarks() * 64) / 64
    ok = not np.any(build_warp(kp, kp, 8, 8))
    v = np.array([0.0625, -0.125])
    field = build_warp(kp, kp + v, 8, 10)
    ok &= np.all(field == field[0, 0]) and np.allclose(field[0, 0], v * (10, 8), rtol=0, atol=1e-12)
    one = build_warp(kp[:1], kp[:1] + v, 8, 10)
    ok &= np.allclose(one, v * (10, 8), rtol=0, atol=1e-12)
    img = np.random.default_rng(14).uniform(size=(8, 8, 3))
    return ok and np.array_equal(apply_warp(Frame(img), np.zeros((8, 8, 2))).image, img)


@check("facerep", "pass-through with full mask; reference with empty mask")
def _():
    from .facerep import MotionParams, ResidualDecoder, synthesize, transform_keypoints
    from .renderer import Frame

    rng = np.random.default_rng(15)
    kp = _landmarks()
    o = Frame(rng.uniform(size=(10, 10, 3)))
    ref = Frame(rng.uniform(size=(10, 10, 3)))
    dec = ResidualDecoder.identity(rng)
    x_p, _ = transform_keypoints(MotionParams.identity(kp))
    full = synthesize(o, ref, x_p, kp, dec, np.ones((10, 10)))
    empty = synthesize(o, ref, x_p, kp, dec, np.zeros((10, 10)))
    return np.array_equal(full.image, o.image) and np.array_equal(empty.image, ref.image)


# --------------------------------------------------------------------------
# trainer


@check("trainer", "toy frames: closed mouth ignores mouth color, open mouth darker, repeatable")
def _():
    from .renderer import Camera
    from .toyscene import ToyScene, toy_ground_truth

    scene = ToyScene()
    cam = Camera.orbit(0, 0, height=24, width=24)
    closed, kp = toy_ground_truth(scene, cam, 0.0, 0.0, 64)
    recolored, _ = toy_ground_truth(replace(scene, mouth_color=(1.0, 1.0, 1.0)), cam, 0.0, 0.0, 64)
    opened, _ = toy_ground_truth(scene, cam, 1.0, 0.0, 64)
    again, _ = toy_ground_truth(scene, cam, 1.0, 0.0, 64)
    mouth = kp[48:68].mean(axis=0)
    r, c = int(mouth[1] * 24), int(mouth[0] * 24)
    return (np.array_equal(closed.image, recolored.image) and np.all(opened.image[r, c] < closed.image[r, c])
            and np.array_equal(opened.image, again.image))


@check("trainer", "loss 0 for equal batches and 0.25 for offset 0.5")
def _():
    from .trainer import photometric_loss

    x = np.random.default_rng(16).uniform(size=(7, 3))
    return photometric_loss(x, x)[0] == 0.0 and photometric_loss(x + 0.5, x)[0] == 0.25


@check("trainer", "zero iterations return the initialization")
def _():
    from .trainer import TrainConfig, init_checkpoint, train

    cfg = TrainConfig(iterations=0, resolutions=(4, 8), log2_table_size=6, audio_frames=10)
    a = train(cfg).checkpoint.parameters()
    b = init_checkpoint(cfg).parameters()
    return all(na == nb and np.array_equal(pa, pb) for (na, pa), (nb, pb) in zip(a, b) if na not in ("audio_mean", "audio_std"))


@check("trainer", "PSNR inf for equal frames, 20 dB for offset 0.1")
def _():
    from .trainer import metric_psnr

    x = np.full((4, 4, 3), 0.5)
    return metric_psnr(x, x) == math.inf and abs(metric_psnr(x, x + 0.1) - 20.0) < 1e-12


@check("trainer", "LMD 0 for equal sets, 5 px for a (3, 4) px offset")
def _():
    from .trainer import metric_lmd

    kp = _landmarks()
    return metric_lmd(kp, kp, 64, 64) == 0.0 and abs(metric_lmd(kp + (3 / 64, 4 / 64), kp, 64, 64) - 5.0) < 1e-12


# --------------------------------------------------------------------------
# bench


@check("bench", "2 s track gives 50 frames with one audio pass")
def _():
    from .bench import StageCounter, run_pipeline, toy_reference
    from .toyscene import ToyScene, toy_audio
    from .trainer import TrainConfig, init_checkpoint

    ckpt = init_checkpoint(TrainConfig(resolutions=(4, 8), log2_table_size=6))
    ref = toy_reference(ToyScene(), 4, 4, P_gt=8)
    counter = StageCounter()
    res = run_pipeline(ckpt, toy_audio(np.full(50, 0.5), 25.0), ref, P=2, counter=counter)
    return len(res.frames) == 50 and counter.audio == 1 and res.audio_calls == 1


@check("bench", "fits: line 2 + 3x and power x^2 are exact")
def _():
    from .bench import fit_scaling

    x = np.arange(1.0, 6.0)
    line = fit_scaling(x, "affine", y=2 + 3 * x)
    sq = fit_scaling(x[:4], "power", y=x[:4] ** 2)
    return (np.allclose([line.coefficients["intercept"], line.coefficients["slope"]], [2, 3], rtol=0, atol=1e-12) and abs(line.r2 - 1) < 1e-12
            and abs(sq.exponent - 2) < 1e-12 and abs(sq.r2 - 1) < 1e-12)


@check("bench", "empty report raises and writes nothing")
def _():
    from .bench import report

    with tempfile.TemporaryDirectory() as d:
        out = Path(d) / "r"
        return _raises(ValueError, report, [], {}, out) and not out.exists()


# --------------------------------------------------------------------------
# cli-io


@check("cli-io", "1x1 white PPM reads as (1,1,1); rewrite is byte stable")
def _():
    from .formats import read_image, write_image

    with tempfile.TemporaryDirectory() as d:
        p, q = Path(d) / "w.ppm", Path(d) / "x.ppm"
        p.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
        ok = np.array_equal(read_image(p).image, np.ones((1, 1, 3)))
        write_image(q, read_image(p))
        return ok and q.read_bytes() == p.read_bytes()


@check("cli-io", "gradient image dequantizes within 1/510")
def _():
    from .formats import read_image, write_image

    img = np.linspace(0, 1, 16 * 16 * 3).reshape(16, 16, 3)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "g.ppm"
        write_image(p, img)
        return np.max(np.abs(read_image(p).image - img)) <= 1 / 510 + 1e-15


@check("cli-io", "checkpoint round trip, corrupt byte, d_a mismatch")
def _():
    from .errors import ChecksumError, DimensionMismatchError
    from .formats import load_checkpoint, save_checkpoint
    from .trainer import TrainConfig, init_checkpoint

    ckpt = init_checkpoint(TrainConfig(resolutions=(4, 8), log2_table_size=6))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "m.lnck"
        save_checkpoint(p, ckpt)
        back = load_checkpoint(p)
        ok = all(np.array_equal(a, b) for (_, a), (_, b) in zip(ckpt.parameters(), back.parameters()))
        try:
            load_checkpoint(p, expect_d_a=16)
            ok = False
        except DimensionMismatchError as exc:
            ok &= "d_a" in str(exc) and "32" in str(exc) and "16" in str(exc)
        raw = bytearray(p.read_bytes())
        raw[-20] ^= 0x01
        p.write_bytes(bytes(raw))
        return ok and _raises(ChecksumError, load_checkpoint, p)


# --------------------------------------------------------------------------


def _raises(exc_type, fn, *args) -> bool:
    try:
        fn(*args)
    except exc_type:
        return True
    return False


def run_selftest() -> list[CheckResult]:
    results = []
    for module, name, fn in CHECKS:
        try:
            ok = bool(fn())
            results.append(CheckResult(module, name, ok, "" if ok else "returned False"))
        except Exception as exc:  # a crashing check is a failed check
            results.append(CheckResult(module, name, False, "".join(traceback.format_exception_only(exc)).strip()))
    return results


def print_table(results: list[CheckResult]) -> None:
    width = max(len(r.module) for r in results)
    for r in results:
        tag = "PASS" if r.passed else "FAIL"
        line = f"{tag}  {r.module:<{width}}  {r.name}"
        if r.detail:
            line += f"  ({r.detail})"
        print(line)
    n = sum(r.passed for r in results)
    print(f"{n}/{len(results)} checks passed")
