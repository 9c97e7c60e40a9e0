"""Analytic toy talking head used as ground truth.

The head is a soft ellipsoid shell. Mouth and eyes are painted on its front
surface: the mouth aperture opens with ``a`` in [0,1] and the eye discs flatten
with blink ``B`` in [0,1]. Sixty-eight landmarks follow the same parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .conditioning import AudioTrack, featurize_audio
from .core import sigmoid
from .renderer import Camera, Frame, generate_rays, render_rays


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class ToyScene:
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radii: tuple[float, float, float] = (0.55, 0.72, 0.55)
    albedo: tuple[float, float, float] = (0.86, 0.66, 0.52)
    density: float = 30.0
    softness: float = 0.05  # shell falloff width in normalized radius
    light: tuple[float, float, float] = (0.3, 0.4, 0.87)
    mouth_center: tuple[float, float] = (0.0, -0.36)
    mouth_half_width: float = 0.2
    mouth_max_half_height: float = 0.13
    mouth_color: tuple[float, float, float] = (0.35, 0.08, 0.10)
    eye_centers: tuple[tuple[float, float], ...] = ((-0.2, 0.17), (0.2, 0.17))
    eye_radius: float = 0.09
    eye_color: tuple[float, float, float] = (0.12, 0.10, 0.14)
    edge: float = 0.4  # soft edge of painted regions, in implicit-function units
    n_keypoints: int = 68

    # ------------------------------------------------------------------
    def density_at(self, points) -> np.ndarray:
        q = (np.asarray(points) - self.center) / self.radii
        r = np.sqrt(np.einsum("ij,ij->i", q, q))
        return self.density * sigmoid((1.0 - r) / self.softness)

    def mouth_weight(self, x, y, a: float):
        if a <= 0.0:
            return np.zeros_like(x)
        h = a * self.mouth_max_half_height
        q = ((x - self.mouth_center[0]) / self.mouth_half_width) ** 2 + ((y - self.mouth_center[1]) / h) ** 2
        return _smoothstep((1.0 - q) / self.edge)

    def eye_weight(self, x, y, blink: float):
        open_ = 1.0 - float(np.clip(blink, 0.0, 1.0))
        if open_ <= 0.0:
            return np.zeros_like(x)
        h = open_ * self.eye_radius
        w = np.zeros_like(x)
        for ex, ey in self.eye_centers:
            q = ((x - ex) / self.eye_radius) ** 2 + ((y - ey) / h) ** 2
            w = np.maximum(w, _smoothstep((1.0 - q) / self.edge))
        return w

    def color_at(self, points, a: float, blink: float) -> np.ndarray:
        p = np.asarray(points) - self.center
        normal = p / np.square(self.radii)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True) + 1e-12
        light = np.asarray(self.light) / np.linalg.norm(self.light)
        shade = 0.55 + 0.45 * np.maximum(normal @ light, 0.0)
        base = shade[:, None] * np.asarray(self.albedo)
        front = _smoothstep(p[:, 2] / (0.2 * self.radii[2]))
        m = self.mouth_weight(p[:, 0], p[:, 1], a) * front
        e = self.eye_weight(p[:, 0], p[:, 1], blink) * front
        col = base * (1.0 - m)[:, None] + np.asarray(self.mouth_color) * m[:, None]
        col = col * (1.0 - e)[:, None] + np.asarray(self.eye_color) * e[:, None]
        return col

    def query(self, a: float, blink: float):
        def q(points, dirs, _rays):
            return self.density_at(points), self.color_at(points, a, blink), 0

        return q

    # ------------------------------------------------------------------
    def surface_point(self, xy) -> np.ndarray:
        """Lift front-view coordinates onto the front of the ellipsoid."""
        xy = np.atleast_2d(xy)
        rx, ry, rz = self.radii
        s = 1.0 - (xy[:, 0] / rx) ** 2 - (xy[:, 1] / ry) ** 2
        z = rz * np.sqrt(np.clip(s, 0.0, None))
        return np.column_stack([xy[:, 0], xy[:, 1], z]) + self.center

    def landmarks_xy(self, a: float, blink: float) -> np.ndarray:
        """Front-view coordinates of the 68 landmarks (jaw 17, brows 10, nose 9,
        eyes 12, mouth 20)."""
        rx, ry, _ = self.radii
        pts = []
        th = np.radians(np.linspace(-70, 70, 17))
        pts += list(zip(0.84 * rx * np.sin(th), -0.1 - 0.7 * ry * np.cos(th)))
        for sgn in (-1, 1):
            for x in np.linspace(0.08, 0.32, 5)[:: -sgn]:
                pts.append((sgn * x, 0.33 - 0.1 * (x - 0.2) ** 2))
        pts += [(0.0, y) for y in np.linspace(0.14, -0.1, 4)]
        pts += [(x, -0.17) for x in np.linspace(-0.08, 0.08, 5)]
        open_ = 1.0 - float(np.clip(blink, 0.0, 1.0))
        er = self.eye_radius
        for ex, ey in self.eye_centers:
            lid = 0.8 * er * open_
            pts += [
                (ex - er, ey),
                (ex - 0.4 * er, ey + lid),
                (ex + 0.4 * er, ey + lid),
                (ex + er, ey),
                (ex + 0.4 * er, ey - lid),
                (ex - 0.4 * er, ey - lid),
            ]
        mx, my = self.mouth_center
        hw = self.mouth_half_width
        h = a * self.mouth_max_half_height
        ang = np.linspace(0.0, 2 * np.pi, 13)[:-1]
        pts += list(zip(mx - 1.1 * hw * np.cos(ang), my + (0.03 + h) * np.sin(ang)))
        ang = np.linspace(0.0, 2 * np.pi, 9)[:-1]
        pts += list(zip(mx - 0.8 * hw * np.cos(ang), my + 0.9 * h * np.sin(ang)))
        out = np.asarray(pts, dtype=float)
        assert len(out) == 68
        return out[: self.n_keypoints]

    def landmarks_3d(self, a: float, blink: float) -> np.ndarray:
        return self.surface_point(self.landmarks_xy(a, blink))

    def keypoints(self, a: float, blink: float, camera: Camera) -> np.ndarray:
        """Landmarks projected to normalized image coordinates."""
        return camera.project(self.landmarks_3d(a, blink))


def toy_ground_truth(scene: ToyScene, camera: Camera, a: float, blink: float, P_gt: int = 256,
                     seed: int = 0, frame_index: int = 0) -> tuple[Frame, np.ndarray]:
    rays = generate_rays(camera)
    colors, _ = render_rays(scene.query(a, blink), rays, camera.near, camera.far, P_gt,
                            seed=seed, frame=frame_index)
    img = np.clip(colors.reshape(camera.height, camera.width, 3), 0.0, 1.0)
    kp = scene.keypoints(a, blink, camera)
    return Frame(img, frame_index, {"P": P_gt, "H": camera.height, "W": camera.width}, kp), kp


def render_region(scene: ToyScene, camera: Camera, a: float, blink: float, rows, cols,
                  P_gt: int = 256, seed: int = 0) -> np.ndarray:
    """Ground-truth colors for selected pixels only, matching ``toy_ground_truth``."""
    rays = generate_rays(camera)
    pix = np.asarray(rows) * camera.width + np.asarray(cols)
    sub = type(rays)(rays.origins[pix], rays.directions[pix], rays.rows[pix], rays.cols[pix])
    colors, _ = render_rays(scene.query(a, blink), sub, camera.near, camera.far, P_gt,
                            seed=seed, frame=0, pixel_ids=pix)
    return np.clip(colors, 0.0, 1.0)


def _region(kp_px: np.ndarray, h: int, w: int, margin: float):
    lo = np.floor(kp_px.min(axis=0) - margin).astype(int)
    hi = np.ceil(kp_px.max(axis=0) + margin).astype(int)
    c0, r0 = np.maximum(lo, 0)
    c1, r1 = np.minimum(hi, [w - 1, h - 1])
    rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
    return rr.ravel(), cc.ravel()


def fit_toy_keypoints(frame: Frame, scene: ToyScene, camera: Camera, P_gt: int = 256,
                      n_grid: int = 41, seed: int = 0) -> tuple[np.ndarray, float, float]:
    """Landmarks of a toy-head image by analysis by synthesis.

    Mouth opening and blink are fitted separately, each over the pixels of its own
    facial region, by scanning a grid and refining the best cell with a parabola.
    Returns ``(keypoints, a, B)``.
    """
    h, w = frame.height, frame.width
    size = np.array([w, h])
    mouth_idx = slice(48, 68)
    eye_idx = slice(36, 48)
    kp_open = scene.keypoints(1.0, 0.0, camera) * size - 0.5
    img = frame.image

    def fit(region_kp, render):
        rows, cols = _region(region_kp, h, w, margin=2.0)
        target = img[rows, cols]
        grid = np.linspace(0.0, 1.0, n_grid)
        err = np.array([np.mean((render(g, rows, cols) - target) ** 2) for g in grid])
        k = int(np.argmin(err))
        if 0 < k < n_grid - 1:
            y0, y1, y2 = err[k - 1 : k + 2]
            den = y0 - 2 * y1 + y2
            off = 0.5 * (y0 - y2) / den if den > 0 else 0.0
            return float(np.clip(grid[k] + off * (grid[1] - grid[0]), 0.0, 1.0))
        return float(grid[k])

    a = fit(kp_open[mouth_idx], lambda g, r, c: render_region(scene, camera, g, 0.0, r, c, P_gt, seed))
    b = fit(kp_open[eye_idx], lambda g, r, c: render_region(scene, camera, 0.0, g, r, c, P_gt, seed))
    return scene.keypoints(a, b, camera), a, b


# --------------------------------------------------------------------------
# toy audio: a harmonic carrier whose loudness encodes mouth opening

TOY_SAMPLE_RATE = 16000
TOY_F0 = 150.0
AMP_CLOSED = 0.01
AMP_OPEN = 0.5


def _carrier(n: int, sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    harmonics = np.arange(1, int(0.5 * sample_rate / TOY_F0))
    wave = np.sin(2 * np.pi * TOY_F0 * np.outer(t, harmonics)).sum(axis=1)
    return wave / len(harmonics)


def toy_audio(openness, fps: float, sample_rate: int = TOY_SAMPLE_RATE) -> AudioTrack:
    """Waveform whose per-frame loudness is log-linear in the given openness values."""
    openness = np.clip(np.asarray(openness, dtype=float), 0.0, 1.0)
    n = int(round(len(openness) * sample_rate / fps))
    frame_of = np.minimum((np.arange(n) * fps / sample_rate).astype(int), len(openness) - 1)
    amp = AMP_CLOSED * (AMP_OPEN / AMP_CLOSED) ** openness[frame_of]
    return AudioTrack(amp * _carrier(n, sample_rate), sample_rate)


@lru_cache(maxsize=None)
def _loudness_range(fps: float, d_a: int, sample_rate: int) -> tuple[float, float]:
    n = int(round(6 * sample_rate / fps))
    lo = featurize_audio(AudioTrack(AMP_CLOSED * _carrier(n, sample_rate), sample_rate), fps, d_a)
    hi = featurize_audio(AudioTrack(AMP_OPEN * _carrier(n, sample_rate), sample_rate), fps, d_a)
    half = d_a // 2
    return float(lo.embeddings[3, :half].mean()), float(hi.embeddings[3, :half].mean())


def audio_openness(embeddings, fps: float, sample_rate: int = TOY_SAMPLE_RATE) -> np.ndarray:
    """Mouth opening implied by the normalized filterbank energy of each embedding."""
    emb = np.atleast_2d(embeddings)
    d_a = emb.shape[1]
    lo, hi = _loudness_range(float(fps), d_a, sample_rate)
    level = emb[:, : d_a // 2].mean(axis=1)
    return np.clip((level - lo) / (hi - lo), 0.0, 1.0)


def speech_envelope(n_frames: int, rng: np.random.Generator, syllable_frames: float = 5.0) -> np.ndarray:
    """Smooth random mouth-opening curve in [0,1] with syllable-like bumps."""
    knots = rng.uniform(0.0, 1.0, size=int(np.ceil(n_frames / syllable_frames)) + 2) ** 1.5
    x = np.arange(n_frames) / syllable_frames
    return np.clip(np.interp(x, np.arange(len(knots)), knots), 0.0, 1.0)
