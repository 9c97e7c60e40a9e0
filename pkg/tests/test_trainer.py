import dataclasses
import math

import numpy as np
import pytest

from talkfield.errors import DivergenceError
from talkfield.formats import save_checkpoint
from talkfield.renderer import Camera, render_frame
from talkfield.toyscene import ToyScene, toy_ground_truth
from talkfield.trainer import (
    AudioBank,
    TrainConfig,
    init_checkpoint,
    make_views,
    metric_lmd,
    metric_psnr,
    photometric_loss,
    train,
)

TINY = dict(iterations=30, rays_per_batch=16, P=8, P_gt=32, height=16, width=16, n_views=4,
            resolutions=(8, 16), log2_table_size=8, trunk_hidden=(8,), gate_hidden=4, d_a=8,
            audio_frames=40, log_every=10)


# toy scene -----------------------------------------------------------------


def test_closed_mouth_ignores_mouth_color():
    cam = Camera.orbit(0, 0, height=32, width=32)
    a, _ = toy_ground_truth(ToyScene(), cam, 0.0, 0.0, 64)
    b, _ = toy_ground_truth(ToyScene(mouth_color=(0.0, 1.0, 0.0)), cam, 0.0, 0.0, 64)
    assert np.array_equal(a.image, b.image)


def test_open_mouth_darker():
    scene = ToyScene()
    cam = Camera.orbit(0, 0, height=64, width=64)
    closed, kp = toy_ground_truth(scene, cam, 0.0, 0.0, 128)
    opened, _ = toy_ground_truth(scene, cam, 1.0, 0.0, 128)
    u, v = kp[48:68].mean(axis=0)
    r, c = int(v * 64), int(u * 64)
    assert np.all(opened.image[r, c] < closed.image[r, c])


def test_ground_truth_deterministic():
    cam = Camera.orbit(5, 3, height=16, width=16)
    a, ka = toy_ground_truth(ToyScene(), cam, 0.4, 0.2, 64, seed=3)
    b, kb = toy_ground_truth(ToyScene(), cam, 0.4, 0.2, 64, seed=3)
    assert np.array_equal(a.image, b.image) and np.array_equal(ka, kb) and ka.shape == (68, 2)


# loss and metrics ----------------------------------------------------------


def test_loss_trivial_cases():
    x = np.random.default_rng(0).uniform(size=(5, 3))
    assert photometric_loss(x, x)[0] == 0.0
    assert photometric_loss(x + 0.5, x)[0] == 0.25


def test_loss_matches_scratch(rng):
    p, t = rng.uniform(size=(17, 3)), rng.uniform(size=(17, 3))
    loss, grad = photometric_loss(p, t)
    want = sum((a - b) ** 2 for a, b in zip(p.ravel(), t.ravel())) / p.size
    assert abs(loss - want) < 1e-14
    assert np.max(np.abs(grad - 2 * (p - t) / p.size)) < 1e-15
    with pytest.raises(ValueError):
        photometric_loss(p, t[:3])


def test_psnr_closed_forms():
    x = np.full((4, 4, 3), 0.3)
    assert metric_psnr(x, x) == math.inf
    assert abs(metric_psnr(x, x + 0.1) - 20.0) < 1e-12
    with pytest.raises(ValueError):
        metric_psnr(x, x[:2])


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(32, 32, 3))
    noise = rng.normal(size=img.shape)
    values = [metric_psnr(img, img + a * noise) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_lmd_closed_forms(rng):
    kp = rng.uniform(size=(68, 2))
    assert metric_lmd(kp, kp, 64, 64) == 0.0
    assert abs(metric_lmd(kp + (3 / 64, 4 / 32), kp, 32, 64) - 5.0) < 1e-12
    with pytest.raises(ValueError):
        metric_lmd(kp, kp[:10], 64, 64)


# training ------------------------------------------------------------------


def test_zero_iterations_is_initialization():
    cfg = TrainConfig(**{**TINY, "iterations": 0})
    res = train(cfg)
    ref = init_checkpoint(cfg, res.bank)
    for (n1, a), (n2, b) in zip(res.checkpoint.parameters(), ref.parameters()):
        assert n1 == n2 and np.array_equal(a, b)
    assert res.log == []


def test_training_deterministic(tmp_path):
    cfg = TrainConfig(**TINY)
    a, b = train(cfg), train(cfg)
    save_checkpoint(tmp_path / "a.lnck", a.checkpoint)
    save_checkpoint(tmp_path / "b.lnck", b.checkpoint)
    assert (tmp_path / "a.lnck").read_bytes() == (tmp_path / "b.lnck").read_bytes()
    assert a.log == b.log and [r[0] for r in a.log] == [0, 10, 20]
    c = train(dataclasses.replace(cfg, seed=8))
    assert not np.array_equal(c.checkpoint.model.grid.params, a.checkpoint.model.grid.params)


def test_divergence_aborts():
    # supervise with the untrained model's own renders so the initial loss is
    # near zero; an absurd learning rate then drives it far above
    cfg = TrainConfig(**{**TINY, "iterations": 700, "lr_tables": 1.0, "lr_networks": 1.0})
    scene = ToyScene()
    rng = np.random.default_rng([cfg.seed, 1])
    bank = AudioBank.build(cfg.audio_frames, cfg.fps, cfg.d_a, rng)
    model = init_checkpoint(cfg, bank).model
    views = make_views(cfg, scene, bank, cfg.n_views, rng)
    for v in views:
        v.image = render_frame(model, v.camera, bank.embeddings[v.audio_index], v.blink, P=64,
                               mode="uniform").image.reshape(-1, 3)
    with pytest.raises(DivergenceError, match="500 iterations"):
        train(cfg, scene, views)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(P=0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)


def test_default_run_improves_loss(default_training):
    result, _, _ = default_training
    losses = dict((it, loss) for it, loss, _ in result.log)
    assert losses[2000] < losses[0]


def test_blink_supervision(default_training):
    result, config, _ = default_training
    model = result.checkpoint.model
    cam = Camera.orbit(0, 0, height=config.height, width=config.width)
    e = result.bank.embeddings[0]
    open_ = render_frame(model, cam, e, 0.0, P=config.P).image
    shut = render_frame(model, cam, e, 1.0, P=config.P).image
    kp = ToyScene().keypoints(0.0, 0.0, cam) * (config.width, config.height) - 0.5
    eyes = kp[36:48]
    lo, hi = eyes.min(axis=0) - 2, eyes.max(axis=0) + 2
    rows, cols = np.mgrid[0 : config.height, 0 : config.width]
    inside = (cols >= lo[0]) & (cols <= hi[0]) & (rows >= lo[1]) & (rows <= hi[1])
    change = np.abs(shut - open_).mean(axis=2)
    assert change[inside].mean() >= 5 * change[~inside].mean()
