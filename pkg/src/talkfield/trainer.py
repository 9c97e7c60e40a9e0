"""Photometric training of the head model on the analytic toy scene, plus the
PSNR and landmark-distance metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .conditioning import featurize_audio
from .core import OptimizerState, optimizer_step
from .errors import DivergenceError
from .facerep import ResidualDecoder
from .field import HeadModel
from .formats import Checkpoint
from .renderer import (
    Camera,
    Frame,
    composite,
    composite_backprop,
    generate_rays,
    render_frame,
    sample_depths,
)
from .toyscene import (
    ToyScene,
    audio_openness,
    fit_toy_keypoints,
    speech_envelope,
    toy_audio,
    toy_ground_truth,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 20000
    rays_per_batch: int = 128
    lr_tables: float = 1e-2
    lr_networks: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.99)
    P: int = 32
    P_gt: int = 256
    seed: int = 7
    height: int = 64
    width: int = 64
    fps: float = 25.0
    rgb_weight: float = 1.0
    n_views: int = 64
    orbit_deg: float = 30.0
    d_a: int = 32
    resolutions: tuple[int, ...] = (16, 32, 64, 128)
    feature_dim: int = 2
    log2_table_size: int = 14
    trunk_hidden: tuple[int, ...] = (32, 32)
    gate_hidden: int = 16
    log_every: int = 100
    audio_frames: int = 400
    train_decoder: bool = False

    def __post_init__(self):
        for name in ("rays_per_batch", "P", "P_gt", "height", "width", "n_views", "d_a", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0 or self.lr_tables <= 0 or self.lr_networks <= 0 or self.fps <= 0:
            raise ValueError("iterations must be >= 0 and rates positive")


# --------------------------------------------------------------------------
# metrics


def photometric_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient with respect to ``pred``."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in size")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def metric_psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for unit-range images; ``inf`` when identical."""
    a = a.image if isinstance(a, Frame) else np.asarray(a, float)
    b = b.image if isinstance(b, Frame) else np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def metric_lmd(pred, gt, height: int, width: int) -> float:
    """Mean Euclidean landmark distance in pixels at the given resolution."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ValueError(f"landmark counts differ: {len(pred)} vs {len(gt)}")
    d = (pred - gt) * (width, height)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


# --------------------------------------------------------------------------
# data


@dataclass
class AudioBank:
    """Audio embeddings of a toy speech track and the mouth opening each implies."""

    embeddings: np.ndarray
    openness: np.ndarray
    fps: float

    @classmethod
    def build(cls, n_frames: int, fps: float, d_a: int, rng: np.random.Generator) -> "AudioBank":
        track = toy_audio(speech_envelope(n_frames, rng), fps)
        emb = featurize_audio(track, fps, d_a).embeddings
        return cls(emb, audio_openness(emb, fps), fps)

    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        return self.embeddings.mean(axis=0), np.maximum(self.embeddings.std(axis=0), 0.1)


@dataclass
class View:
    camera: Camera
    audio_index: int
    openness: float
    blink: float
    image: np.ndarray  # (H*W, 3)
    keypoints: np.ndarray


def _sample_blink(rng) -> float:
    r = rng.uniform()
    return 0.0 if r < 0.3 else 1.0 if r < 0.5 else float(rng.uniform())


def make_views(config: TrainConfig, scene: ToyScene, bank: AudioBank, n: int,
               rng: np.random.Generator) -> list[View]:
    views = []
    for k in range(n):
        az, el = rng.uniform(-config.orbit_deg, config.orbit_deg, size=2)
        cam = Camera.orbit(az, el, height=config.height, width=config.width)
        idx = int(rng.integers(len(bank.openness)))
        a = float(bank.openness[idx])
        b = _sample_blink(rng)
        frame, kp = toy_ground_truth(scene, cam, a, b, config.P_gt, seed=config.seed, frame_index=k)
        views.append(View(cam, idx, a, b, frame.image.reshape(-1, 3), kp))
    return views


# --------------------------------------------------------------------------
# one batch


def batch_loss_and_grads(model: HeadModel, origins, dirs, targets, e_norm, blink, near, far, P,
                         seed=0, frame=0, pixel_ids=None, background=(0.0, 0.0, 0.0)):
    """MSE of composited colors against ``targets`` and parameter gradients.

    ``e_norm`` is ``(n_rays, d_a)`` standardized audio, ``blink`` ``(n_rays,)``.
    """
    n = len(origins)
    depths, deltas = sample_depths(n, near, far, P, "stratified", seed, frame, pixel_ids)
    pts = (origins[:, None, :] + depths[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    pdirs = np.repeat(dirs, P, axis=0)
    sigma, rgb, cache = model.forward_train(pts, pdirs, np.repeat(e_norm, P, axis=0), np.repeat(blink, P))
    sig = sigma.reshape(n, P)
    col = rgb.reshape(n, P, 3)
    comp = composite(sig, col, deltas, background)
    loss, d_pred = photometric_loss(comp.color, targets)
    d_sig, d_col = composite_backprop(comp, sig, col, deltas, d_pred, background)
    grads = model.backward(cache, d_sig.ravel(), d_col.reshape(-1, 3))
    return loss, grads, comp.color


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[tuple[int, float, float]] = field(default_factory=list)
    bank: AudioBank | None = None

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "psnr_probe"])
            w.writerows(self.log)


def config_echo(config: TrainConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}


def init_checkpoint(config: TrainConfig, bank: AudioBank | None = None) -> Checkpoint:
    rng = np.random.default_rng(config.seed)
    model = HeadModel.init(rng, config.d_a, config.resolutions, config.feature_dim,
                           config.log2_table_size, trunk_hidden=config.trunk_hidden,
                           gate_hidden=config.gate_hidden)
    if bank is not None:
        model.audio_mean[:], model.audio_std[:] = bank.stats()
    decoder = ResidualDecoder.identity(rng)
    return Checkpoint(model, decoder, config_echo(config))


def train(config: TrainConfig, scene: ToyScene | None = None, views: list[View] | None = None,
          progress=None) -> TrainResult:
    """Fit the head model to toy ground truth with Adam on random ray batches."""
    scene = scene or ToyScene()
    data_rng = np.random.default_rng([config.seed, 1])
    bank = AudioBank.build(config.audio_frames, config.fps, config.d_a, data_rng)
    ckpt = init_checkpoint(config, bank)
    result = TrainResult(ckpt, [], bank)
    if config.iterations == 0:
        return result
    model = ckpt.model
    if views is None:
        views = make_views(config, scene, bank, config.n_views, data_rng)
    hw = config.height * config.width
    rays = [generate_rays(v.camera) for v in views]
    origins = np.stack([r.origins for r in rays])
    directions = np.stack([r.directions for r in rays])
    images = np.stack([v.image for v in views])
    e_norm = model.normalize_audio(bank.embeddings[[v.audio_index for v in views]])
    blinks = np.array([v.blink for v in views])
    cam = views[0].camera
    near, far = cam.near, cam.far

    b1, b2 = config.betas
    opt_tab = OptimizerState("adam", config.lr_tables, b1, b2, 1e-15)
    opt_net = OptimizerState("adam", config.lr_networks, b1, b2, 1e-8)
    tab_params = {"triplane": model.grid.params}
    net_params = {name: p for name, p in model.parameters() if name.startswith(("gates.", "field."))}

    batch_rng = np.random.default_rng([config.seed, 2])
    initial = None
    over = 0
    for it in range(config.iterations):
        vi = batch_rng.integers(len(views), size=config.rays_per_batch)
        pi = batch_rng.integers(hw, size=config.rays_per_batch)
        loss, grads, _ = batch_loss_and_grads(
            model, origins[vi, pi], directions[vi, pi], images[vi, pi], e_norm[vi], blinks[vi],
            near, far, config.P, seed=config.seed, frame=it, pixel_ids=vi * hw + pi,
        )
        loss *= config.rgb_weight
        if initial is None:
            initial = max(loss, 1e-12)
        over = over + 1 if loss > 10.0 * initial else 0
        if over >= 500:
            raise DivergenceError(
                f"loss {loss:.4g} above 10x initial {initial:.4g} for 500 iterations (at {it})"
            )
        if it % config.log_every == 0:
            probe = 10.0 * math.log10(1.0 / loss) if loss > 0 else math.inf
            result.log.append((it, loss, probe))
            log.info("iter %d loss %.6f psnr %.2f", it, loss, probe)
            if progress:
                progress(it, loss)
        w = config.rgb_weight
        optimizer_step(opt_tab, tab_params, {"triplane": w * grads["triplane"]})
        optimizer_step(opt_net, net_params, {k: w * grads[k] for k in net_params})
    return result


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    psnr: list[float]
    lmd: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_lmd(self) -> float:
        return float(np.mean(self.lmd))


def heldout_views(config: TrainConfig, scene: ToyScene, n: int = 4) -> tuple[list[View], AudioBank]:
    """Views with cameras, speech and blinks never used in training."""
    rng = np.random.default_rng([config.seed, 99])
    bank = AudioBank.build(120, config.fps, config.d_a, rng)
    return make_views(config, scene, bank, n, rng), bank


def evaluate(ckpt: Checkpoint, config: TrainConfig, scene: ToyScene | None = None, n: int = 4,
             seed: int = 0) -> EvalResult:
    """Held-out PSNR of rendered frames and LMD of landmarks fitted to them."""
    scene = scene or ToyScene()
    views, bank = heldout_views(config, scene, n)
    psnrs, lmds = [], []
    for k, v in enumerate(views):
        frame = render_frame(ckpt.model, v.camera, bank.embeddings[v.audio_index], v.blink,
                             P=config.P, seed=seed, frame_index=k)
        gt = v.image.reshape(config.height, config.width, 3)
        psnrs.append(metric_psnr(frame.image, gt))
        kp, _, _ = fit_toy_keypoints(frame, scene, v.camera, config.P_gt, seed=config.seed)
        lmds.append(metric_lmd(kp, v.keypoints, config.height, config.width))
    return EvalResult(psnrs, lmds)
