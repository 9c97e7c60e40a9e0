"""End-to-end inference pipeline with per-stage timing, scaling sweeps, least
squares fits and a CSV/SVG report.

The pipeline featurizes the audio once, then renders and face-replaces each
frame. ``measure_scaling`` sweeps one knob with the others pinned to a preset.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .conditioning import AudioEmbeddingSequence, AudioTrack, featurize_audio
from .errors import TalkfieldError
from .facerep import replace_face
from .formats import Checkpoint
from .renderer import Camera, Frame, render_frame
from .toyscene import ToyScene, audio_openness, speech_envelope, toy_audio, toy_ground_truth

KNOBS = ("frames", "resolution", "points", "audio", "landmarks")
COMPONENTS = ("audio", "rendering", "replacement", "total")
TIMER_TICKS_MIN = 20


@dataclass(frozen=True)
class Preset:
    name: str
    height: int
    width: int
    P: int
    d_a: int = 32
    L: int = 68
    fps: float = 25.0
    dtype: str = "float32"
    workers: int = 1


PRESETS = {
    "desk": Preset("desk", 128, 128, 32),
    "fast": Preset("fast", 64, 64, 16),
    "paper": Preset("paper", 512, 512, 64),
}

REFERENCE_CONTEXT = {
    "fps_512": "33 FPS at 512x512 on an RTX 4090",
    "fps_640": "drops to approximately 24 FPS at 640x640",
    "audio": "approximately 0.05 s for 5 s of audio to 0.25 s for 25 s",
    "replacement": "0.06 s at 25 landmarks to approximately 0.48 s at 200 landmarks",
    "points": "render time reported sub-linear in sampled points",
    "resolution_exponent": "render cost reported to grow like pixels^(2/3)",
}


def machine_fingerprint(workers: int = 1) -> str:
    return (
        f"{platform.machine()} {platform.processor() or 'cpu'} | cores={os.cpu_count()} | "
        f"python {platform.python_version()} | numpy {np.__version__} | workers={workers}"
    )


# --------------------------------------------------------------------------
# pipeline


def resample_landmarks(kp: np.ndarray, L: int) -> np.ndarray:
    """``L`` points by linear interpolation along the ordered landmark list, so
    source and reference sets resampled alike stay in correspondence."""
    kp = np.asarray(kp, float)
    if L == len(kp):
        return kp.copy()
    t = np.linspace(0.0, len(kp) - 1.0, L)
    return np.column_stack([np.interp(t, np.arange(len(kp)), kp[:, c]) for c in range(kp.shape[1])])


def camera_track(n: int, height: int, width: int, sway_deg: float = 8.0) -> list[Camera]:
    """Gentle side-to-side head turn, one camera per frame."""
    return [Camera.orbit(sway_deg * math.sin(0.15 * i), 0.0, height=height, width=width) for i in range(n)]


@dataclass
class PipelineResult:
    frames: list[Frame]
    motion_frames: list[Frame]
    audio_ms: float
    render_ms: list[float]
    replacement_ms: list[float]
    audio_calls: int
    total_ms: float

    @property
    def per_frame_ms(self) -> np.ndarray:
        return np.asarray(self.render_ms) + np.asarray(self.replacement_ms)


@dataclass
class StageCounter:
    audio: int = 0


def toy_keypoints(scene: ToyScene, L: int | None = None, fps: float = 25.0):
    """Keypoint source for toy-rendered frames: analytic landmarks at the mouth
    opening implied by the frame's audio embedding."""

    def kp(index: int, camera: Camera, e_a: np.ndarray, blink: float) -> np.ndarray:
        a = float(audio_openness(e_a, fps)[0])
        pts = scene.keypoints(a, blink, camera)
        return pts if L is None else resample_landmarks(pts, L)

    return kp


def toy_reference(scene: ToyScene, height: int, width: int, L: int | None = None, P_gt: int = 128,
                  seed: int = 0) -> Frame:
    """Frontal, mouth-closed, eyes-open toy frame with its keypoints."""
    cam = Camera.orbit(0.0, 0.0, height=height, width=width)
    frame, kp = toy_ground_truth(scene, cam, 0.0, 0.0, P_gt, seed=seed)
    if L is not None:
        frame.keypoints = resample_landmarks(kp, L)
    return frame


def run_pipeline(ckpt: Checkpoint, audio, ref_frame: Frame, n_frames: int | None = None,
                 cameras: Sequence[Camera] | Callable[[int], Camera] | None = None, *,
                 blink=None, P: int = 32, fps: float = 25.0, seed: int = 0,
                 keypoints: Callable | None = None, scene: ToyScene | None = None,
                 workers: int = 1, dtype=np.float64, bandwidth: float | None = None,
                 counter: StageCounter | None = None) -> PipelineResult:
    """Audio once, then render and replace every frame.

    ``audio`` is an ``AudioTrack`` (featurized here) or a precomputed
    ``AudioEmbeddingSequence``. Frames beyond the audio hold the last embedding.
    ``keypoints(i, camera, e_a, blink)`` supplies each motion frame's keypoints;
    the default reads them off the toy scene.
    """
    counter = counter or StageCounter()
    if ref_frame.keypoints is None:
        raise TalkfieldError("reference frame carries no keypoints")
    h, w = ref_frame.height, ref_frame.width
    t_start = time.perf_counter()

    t0 = time.perf_counter()
    if isinstance(audio, AudioTrack):
        seq = featurize_audio(audio, fps, ckpt.model.d_a)
    elif isinstance(audio, AudioEmbeddingSequence):
        seq = audio
    else:
        raise TypeError("audio must be an AudioTrack or AudioEmbeddingSequence")
    counter.audio += 1
    audio_ms = (time.perf_counter() - t0) * 1e3

    n = len(seq) if n_frames is None else int(n_frames)
    if n < 1:
        raise ValueError("need at least one frame")
    if cameras is None:
        cams = camera_track(n, h, w)
        cam_at = cams.__getitem__
    elif callable(cameras):
        cam_at = cameras
    else:
        cam_at = list(cameras).__getitem__
    if keypoints is None:
        keypoints = toy_keypoints(scene or ToyScene(), len(ref_frame.keypoints), seq.fps)
    if blink is None:
        blink = seq.blink if seq.blink is not None else np.zeros(n)
    blink = np.asarray(blink, float)
    model = ckpt.model.astype(dtype)

    frames, motion, r_ms, f_ms = [], [], [], []
    for i in range(n):
        e = seq.embeddings[min(i, len(seq) - 1)]
        b = float(blink[min(i, len(blink) - 1)]) if blink.size else 0.0
        cam = cam_at(i)
        try:
            t0 = time.perf_counter()
            o = render_frame(model, cam, e, b, P=P, seed=seed, frame_index=i, workers=workers, dtype=dtype)
            t1 = time.perf_counter()
            o.keypoints = keypoints(i, cam, e, b)
            out = replace_face(o, ref_frame, ckpt.decoder, bandwidth=bandwidth)
            t2 = time.perf_counter()
        except TalkfieldError as exc:
            exc.args = (f"frame {i}: {exc}",)
            raise
        out.index = i
        out.stats = dict(o.stats)
        frames.append(out)
        motion.append(o)
        r_ms.append((t1 - t0) * 1e3)
        f_ms.append((t2 - t1) * 1e3)
    total = (time.perf_counter() - t_start) * 1e3
    return PipelineResult(frames, motion, audio_ms, r_ms, f_ms, counter.audio, total)


# --------------------------------------------------------------------------
# measurement


@dataclass
class BenchRecord:
    knob: str
    value: float
    component: str
    wall_ms: float
    repeats: int
    fingerprint: str
    samples: list[float] = field(default_factory=list)
    mad: float = 0.0
    flagged: bool = False
    reason: str = ""

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component {self.component!r}")
        if not self.wall_ms > 0:
            raise ValueError("wall_ms must be positive")
        if self.repeats < 3:
            raise ValueError("need at least 3 repeats")


def timer_resolution_ms() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e3


def summarize(knob: str, value: float, component: str, samples: Sequence[float], fingerprint: str,
              mad_limit: float = 0.10) -> BenchRecord:
    """Median record with the hygiene flags: fewer than 20 timer ticks or a
    repeat-to-repeat MAD above ``mad_limit`` of the median."""
    med = statistics.median(samples)
    mad = statistics.median(abs(s - med) for s in samples)
    reasons = []
    if med < TIMER_TICKS_MIN * timer_resolution_ms():
        reasons.append("below timer resolution")
    if mad > mad_limit * med:
        reasons.append(f"MAD {mad / med:.0%} of median")
    return BenchRecord(knob, float(value), component, max(med, 1e-9), len(samples), fingerprint,
                       list(samples), mad, bool(reasons), "; ".join(reasons))


@dataclass
class BenchContext:
    """Everything a sweep needs besides the knob: model, preset, reference scene."""

    ckpt: Checkpoint
    preset: Preset
    scene: ToyScene = field(default_factory=ToyScene)
    seed: int = 0
    rng_seed: int = 11

    @property
    def dtype(self):
        return np.dtype(self.preset.dtype).type

    def audio_track(self, seconds: float) -> AudioTrack:
        n = max(1, int(math.ceil(seconds * self.preset.fps)))
        return toy_audio(speech_envelope(n, np.random.default_rng(self.rng_seed)), self.preset.fps)


def measure_scaling(knob: str, values: Sequence, ctx: BenchContext, repeats: int = 5,
                    warmup: int = 1) -> list[BenchRecord]:
    """Median wall time per component for each knob value; the first ``warmup``
    runs of every configuration are discarded."""
    if knob not in KNOBS:
        raise ValueError(f"unknown knob {knob!r}; choose from {KNOBS}")
    if len(values) < 4:
        raise ValueError("need at least 4 knob values")
    if repeats < 5:
        raise ValueError("need at least 5 repeats per value")
    p = ctx.preset
    fp = machine_fingerprint(p.workers)
    records: list[BenchRecord] = []
    runner = _RUNNERS[knob]
    setup = runner.setup(ctx, values)
    for v in values:
        per: dict[str, list[float]] = {}
        for k in range(warmup + repeats):
            times = runner.run(ctx, setup, v)
            if k < warmup:
                continue
            for comp, ms in times.items():
                per.setdefault(comp, []).append(ms)
        for comp, samples in per.items():
            records.append(summarize(knob, v, comp, samples, fp))
    return records


class _FramesRunner:
    """Pipeline time against frame count with the audio track held at the
    longest length, so the audio stage is a constant amortized over N."""

    @staticmethod
    def setup(ctx, values):
        p = ctx.preset
        ref = toy_reference(ctx.scene, p.height, p.width, p.L)
        track = ctx.audio_track(max(values) / p.fps)
        return ref, track

    @staticmethod
    def run(ctx, setup, n):
        ref, track = setup
        p = ctx.preset
        res = run_pipeline(ctx.ckpt, track, ref, int(n), P=p.P, fps=p.fps, seed=ctx.seed,
                           scene=ctx.scene, workers=p.workers, dtype=ctx.dtype)
        return {
            "audio": res.audio_ms,
            "rendering": sum(res.render_ms),
            "replacement": sum(res.replacement_ms),
            "total": res.total_ms,
        }


class _ResolutionRunner:
    """One frame (render + replacement) at an R x R resolution."""

    @staticmethod
    def setup(ctx, values):
        p = ctx.preset
        refs = {int(r): toy_reference(ctx.scene, int(r), int(r), p.L) for r in values}
        seq = featurize_audio(ctx.audio_track(1.0), p.fps, ctx.ckpt.model.d_a)
        return refs, seq

    @staticmethod
    def run(ctx, setup, r):
        refs, seq = setup
        p = ctx.preset
        res = run_pipeline(ctx.ckpt, seq, refs[int(r)], 1, P=p.P, fps=p.fps, seed=ctx.seed,
                           scene=ctx.scene, workers=p.workers, dtype=ctx.dtype)
        return {"rendering": res.render_ms[0], "replacement": res.replacement_ms[0],
                "total": res.render_ms[0] + res.replacement_ms[0]}


class _PointsRunner:
    """Render time of one frame against samples per ray."""

    @staticmethod
    def setup(ctx, values):
        p = ctx.preset
        seq = featurize_audio(ctx.audio_track(1.0), p.fps, ctx.ckpt.model.d_a)
        cam = Camera.orbit(0.0, 0.0, height=p.height, width=p.width)
        return ctx.ckpt.model.astype(ctx.dtype), seq.embeddings[0], cam

    @staticmethod
    def run(ctx, setup, P):
        model, e, cam = setup
        t0 = time.perf_counter()
        render_frame(model, cam, e, 0.0, P=int(P), seed=ctx.seed, workers=ctx.preset.workers,
                     dtype=ctx.dtype)
        return {"rendering": (time.perf_counter() - t0) * 1e3}


class _AudioRunner:
    """Featurization time against track duration in seconds."""

    @staticmethod
    def setup(ctx, values):
        return {float(t): ctx.audio_track(float(t)) for t in values}

    @staticmethod
    def run(ctx, setup, T):
        track = setup[float(T)]
        t0 = time.perf_counter()
        featurize_audio(track, ctx.preset.fps, ctx.ckpt.model.d_a)
        return {"audio": (time.perf_counter() - t0) * 1e3}


class _LandmarksRunner:
    """Replacement time of one fixed motion frame against landmark count."""

    @staticmethod
    def setup(ctx, values):
        p = ctx.preset
        cam = Camera.orbit(6.0, 0.0, height=p.height, width=p.width)
        seq = featurize_audio(ctx.audio_track(1.0), p.fps, ctx.ckpt.model.d_a)
        e = seq.embeddings[len(seq) // 2]
        o = render_frame(ctx.ckpt.model.astype(ctx.dtype), cam, e, 0.0, P=p.P, seed=ctx.seed,
                         dtype=ctx.dtype)
        a = float(audio_openness(e, p.fps)[0])
        kp_src = ctx.scene.keypoints(a, 0.0, cam)
        ref = toy_reference(ctx.scene, p.height, p.width)
        return {int(L): (o, resample_landmarks(kp_src, int(L)), resample_landmarks(ref.keypoints, int(L)), ref)
                for L in values}

    @staticmethod
    def run(ctx, setup, L):
        o, kp_src, kp_ref, ref = setup[int(L)]
        t0 = time.perf_counter()
        replace_face(o, ref, ctx.ckpt.decoder, kp_src, kp_ref)
        return {"replacement": (time.perf_counter() - t0) * 1e3}


_RUNNERS = {
    "frames": _FramesRunner,
    "resolution": _ResolutionRunner,
    "points": _PointsRunner,
    "audio": _AudioRunner,
    "landmarks": _LandmarksRunner,
}


# --------------------------------------------------------------------------
# fits


@dataclass
class ScalingFit:
    model: str
    coefficients: dict
    r2: float
    residual_max: float
    n_points: int

    @property
    def exponent(self) -> float | None:
        return self.coefficients.get("exponent")

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        c = self.coefficients
        if self.model == "affine":
            return c["intercept"] + c["slope"] * x
        if self.model == "power":
            return c["scale"] * x ** c["exponent"]
        return c["c"] / x


def _r2(y, pred) -> float:
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)


def _xy(records_or_x, y=None, component: str | None = None):
    if y is not None:
        return np.asarray(records_or_x, float), np.asarray(y, float)
    recs = [r for r in records_or_x if not r.flagged and (component is None or r.component == component)]
    return np.array([r.value for r in recs]), np.array([r.wall_ms for r in recs])


def fit_scaling(records, model: str = "affine", y=None, component: str | None = None) -> ScalingFit:
    """Least-squares fit of wall time against knob value.

    ``affine``: ``y = a + b x``. ``power``: ``log y = log a + e log x`` (R² in log
    space). ``inverse``: ``y = c / x`` through the origin. Pass either records
    (flagged ones are excluded) or ``x`` and ``y`` arrays.
    """
    x, yv = _xy(records, y, component)
    if len(x) < 4:
        raise ValueError(f"need at least 4 points to fit, have {len(x)}")
    if model == "affine":
        slope, intercept = np.polyfit(x, yv, 1)
        pred = intercept + slope * x
        return ScalingFit(model, {"intercept": float(intercept), "slope": float(slope)}, _r2(yv, pred),
                          float(np.max(np.abs(yv - pred))), len(x))
    if model == "power":
        if np.any(x <= 0) or np.any(yv <= 0):
            raise ValueError("power fit needs positive values")
        e, log_a = np.polyfit(np.log(x), np.log(yv), 1)
        pred = np.exp(log_a) * x**e
        return ScalingFit(model, {"scale": float(np.exp(log_a)), "exponent": float(e)},
                          _r2(np.log(yv), log_a + e * np.log(x)), float(np.max(np.abs(yv - pred))), len(x))
    if model == "inverse":
        if np.any(x <= 0):
            raise ValueError("inverse fit needs positive knob values")
        c = float(np.sum(yv / x) / np.sum(1.0 / x**2))
        pred = c / x
        return ScalingFit(model, {"c": c}, _r2(yv, pred), float(np.max(np.abs(yv - pred))), len(x))
    raise ValueError(f"unknown model {model!r}")


# --------------------------------------------------------------------------
# report

_SVG_W, _SVG_H, _PAD = 480, 320, 50


def _svg_panel(title: str, xlabel: str, ylabel: str, series: dict[str, tuple], fits: dict | None = None,
               hlines: Sequence[tuple[float, str]] = ()) -> str:
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()])
    ys = np.concatenate([np.asarray(s[1], float) for s in series.values()] + [np.array([v for v, _ in hlines])])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = 0.0, float(ys.max()) * 1.1 or 1.0
    if x1 == x0:
        x1 = x0 + 1.0

    def px(x):
        return _PAD + (x - x0) / (x1 - x0) * (_SVG_W - 2 * _PAD)

    def py(y):
        return _SVG_H - _PAD - (y - y0) / (y1 - y0) * (_SVG_H - 2 * _PAD)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_SVG_W / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{_PAD}" y1="{_SVG_H - _PAD}" x2="{_SVG_W - _PAD}" y2="{_SVG_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_SVG_H - _PAD}" stroke="black"/>',
        f'<text x="{_SVG_W / 2}" y="{_SVG_H - 12}" text-anchor="middle">{xlabel}</text>',
        f'<text x="14" y="{_SVG_H / 2}" transform="rotate(-90 14 {_SVG_H / 2})" text-anchor="middle">{ylabel}</text>',
    ]
    for t in np.linspace(x0, x1, 5):
        out.append(f'<text x="{px(t):.1f}" y="{_SVG_H - _PAD + 14}" text-anchor="middle">{t:.4g}</text>')
    for t in np.linspace(y0, y1, 5):
        out.append(f'<text x="{_PAD - 4}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.4g}</text>')
    for value, label in hlines:
        out.append(f'<line x1="{_PAD}" y1="{py(value):.1f}" x2="{_SVG_W - _PAD}" y2="{py(value):.1f}" '
                   f'stroke="gray" stroke-dasharray="5,4"/>')
        out.append(f'<text x="{_SVG_W - _PAD + 2}" y="{py(value) + 4:.1f}">{label}</text>')
    for k, (name, (sx, sy)) in enumerate(series.items()):
        c = colors[k % len(colors)]
        for x, y in zip(sx, sy):
            out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{c}"/>')
        fit = (fits or {}).get(name)
        if fit is not None:
            gx = np.linspace(x0, x1, 50)
            pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(gx, fit.predict(gx)))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{c}"/>')
        out.append(f'<text x="{_PAD + 8}" y="{_PAD + 14 * k}" fill="{c}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out)


_XLABEL = {
    "frames": "frames N",
    "resolution": "resolution R (pixels per side)",
    "points": "samples per ray P",
    "audio": "audio duration T (s)",
    "landmarks": "landmarks L",
}


def report(records: Sequence[BenchRecord], fits: dict, out_dir) -> list[Path]:
    """One raw CSV and one SVG per knob, an FPS panel when resolution was swept,
    and a JSON metadata file with fits and published reference numbers. Returns written paths.

    ``fits`` maps ``(knob, component)`` to a ``ScalingFit``.
    """
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TalkfieldError(f"cannot create output directory {out}: {exc}") from exc
    written: list[Path] = []
    knobs = sorted({r.knob for r in records}, key=KNOBS.index)
    for knob in knobs:
        recs = [r for r in records if r.knob == knob]
        path = out / f"{knob}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["knob", "value", "component", "wall_ms", "repeat"])
            for r in recs:
                for k, s in enumerate(r.samples):
                    w.writerow([knob, r.value, r.component, f"{s:.6f}", k])
        written.append(path)
        series = {}
        for comp in COMPONENTS:
            rs = [r for r in recs if r.component == comp]
            if rs:
                series[comp] = ([r.value for r in rs], [r.wall_ms for r in rs])
        panel_fits = {c: f for (k, c), f in fits.items() if k == knob}
        svg = out / f"{knob}.svg"
        svg.write_text(_svg_panel(f"wall time vs {_XLABEL[knob]}", _XLABEL[knob], "median wall ms",
                                  series, panel_fits))
        written.append(svg)
        if knob == "resolution":
            tot = [r for r in recs if r.component == "total"]
            if tot:
                fps = ([r.value for r in tot], [1000.0 / r.wall_ms for r in tot])
                path = out / "fps.svg"
                path.write_text(_svg_panel("frames per second vs resolution", _XLABEL[knob], "FPS",
                                           {"fps": fps}, None, [(24.0, "24 FPS"), (30.0, "30 FPS")]))
                written.append(path)
    meta = {
        "fingerprint": records[0].fingerprint,
        "reference_context": REFERENCE_CONTEXT,
        "fits": {f"{k}/{c}": asdict(f) for (k, c), f in fits.items()},
        "flagged": [f"{r.knob}={r.value} {r.component}: {r.reason}" for r in records if r.flagged],
    }
    path = out / "report.json"
    path.write_text(json.dumps(meta, indent=2))
    written.append(path)
    return written


def standard_fits(records: Sequence[BenchRecord]) -> dict:
    """The fits the report shows for whichever knobs are present."""
    fits = {}
    knobs = {r.knob for r in records}
    want = {
        "frames": [("total", "affine"), ("rendering", "affine"), ("replacement", "affine")],
        "resolution": [("rendering", "affine"), ("total", "affine")],
        "points": [("rendering", "affine")],
        "audio": [("audio", "affine")],
        "landmarks": [("replacement", "affine")],
    }
    for knob in knobs:
        for comp, model in want[knob]:
            sel = [r for r in records if r.knob == knob and r.component == comp]
            try:
                fits[(knob, comp)] = fit_scaling(sel, model)
            except ValueError:
                pass
    return fits
