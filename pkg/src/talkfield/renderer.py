"""Pinhole rays, stratified depth sampling and alpha compositing."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# Rays are processed in chunks of this size regardless of worker count, which
# keeps every floating-point reduction identical across schedules.
CHUNK_RAYS = 1024


@dataclass
class Camera:
    """``rotation`` columns are the camera right, up and backward axes in world
    coordinates; the camera looks along ``-rotation[:, 2]``."""

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    height: int
    width: int
    near: float
    far: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera orientation is not orthonormal")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, focal, height, width, near, far) -> "Camera":
        eye = np.asarray(eye, float)
        back = eye - np.asarray(target, float)
        back /= np.linalg.norm(back)
        right = np.cross(up, back)
        right /= np.linalg.norm(right)
        upv = np.cross(back, right)
        return cls(eye, np.stack([right, upv, back], axis=1), focal, height, width, near, far)

    @classmethod
    def orbit(cls, azimuth_deg: float, elevation_deg: float, radius: float = 2.5, *,
              height: int, width: int, fov_deg: float = 40.0, near: float = 1.2,
              far: float = 3.8) -> "Camera":
        """Camera on a sphere around the origin; azimuth 0, elevation 0 sits on +z."""
        az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
        eye = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls.look_at(eye, (0, 0, 0), focal=focal, height=height, width=width, near=near, far=far)

    def with_size(self, height: int, width: int) -> "Camera":
        scale = width / self.width
        return Camera(self.position, self.rotation, self.focal * scale, height, width, self.near, self.far)

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points to normalized image coordinates ``(u, v)`` in [0,1]²
        (u grows to the right, v downward)."""
        local = (np.asarray(points, float) - self.position) @ self.rotation
        x = self.focal * local[:, 0] / -local[:, 2] + 0.5 * self.width
        y = -self.focal * local[:, 1] / -local[:, 2] + 0.5 * self.height
        return np.stack([x / self.width, y / self.height], axis=1)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    row: int
    col: int


@dataclass
class RayBatch:
    origins: np.ndarray  # (n, 3)
    directions: np.ndarray  # (n, 3) unit
    rows: np.ndarray
    cols: np.ndarray

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, k) -> Ray:
        return Ray(self.origins[k], self.directions[k], int(self.rows[k]), int(self.cols[k]))


def generate_rays(camera: Camera) -> RayBatch:
    """One ray through each pixel center, row-major."""
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    cx, cy = 0.5 * camera.width, 0.5 * camera.height
    d_cam = np.stack(
        [(cols + 0.5 - cx) / camera.focal, -(rows + 0.5 - cy) / camera.focal, -np.ones(rows.size)], axis=1
    )
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, d.shape).copy()
    return RayBatch(origins, d, rows, cols)


# --------------------------------------------------------------------------
# counter-based uniforms


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, frame: int, pixel: np.ndarray, n: int) -> np.ndarray:
    """``(len(pixel), n)`` uniforms in [0,1) that depend only on
    ``(seed, frame, pixel, column)``."""
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    key = _splitmix64(key ^ np.array([frame & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    pix = np.asarray(pixel, dtype=np.uint64)[:, None]
    ctr = (pix << np.uint64(16)) | np.arange(n, dtype=np.uint64)[None, :]
    bits = _splitmix64(ctr ^ key)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def sample_depths(n_rays: int, near: float, far: float, P: int, mode: str = "stratified",
                  seed: int = 0, frame: int = 0, pixel_ids=None):
    """Sorted depths ``(n_rays, P)`` and segment lengths.

    Uniform mode uses bin left edges; stratified draws one jittered depth per
    equal bin. The last segment runs to ``far``.
    """
    if P < 2:
        raise ValueError("need at least 2 samples per ray")
    if mode not in ("uniform", "stratified"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    width = (far - near) / P
    edges = near + width * np.arange(P)
    if mode == "uniform":
        depths = np.broadcast_to(edges, (n_rays, P)).copy()
    else:
        if pixel_ids is None:
            pixel_ids = np.arange(n_rays)
        depths = edges + width * counter_uniform(seed, frame, pixel_ids, P)
    deltas = np.empty_like(depths)
    deltas[:, :-1] = depths[:, 1:] - depths[:, :-1]
    deltas[:, -1] = far - depths[:, -1]
    return depths, deltas


def sample_ray(ray: Ray, near: float, far: float, P: int, mode: str = "stratified",
               seed: int = 0, frame: int = 0, pixel: int = 0):
    """Sample positions and segment lengths along one ray."""
    depths, deltas = sample_depths(1, near, far, P, mode, seed, frame, np.array([pixel]))
    positions = ray.origin + depths[0, :, None] * ray.direction
    return positions, depths[0], deltas[0]


# --------------------------------------------------------------------------
# compositing


@dataclass
class SampleBatch:
    positions: np.ndarray  # (P, 3)
    deltas: np.ndarray  # (P,)
    sigmas: np.ndarray  # (P,)
    colors: np.ndarray  # (P, 3)

    def __post_init__(self):
        if np.any(self.deltas <= 0):
            raise ValueError("segment lengths must be positive")
        if np.any(self.sigmas < 0):
            raise ValueError("densities must be nonnegative")
        self.colors = np.clip(self.colors, 0.0, 1.0)


@dataclass
class Composite:
    color: np.ndarray  # (n, 3)
    weights: np.ndarray  # (n, P)
    transmittance: np.ndarray  # (n, P + 1), last column is the residual


def composite(sigmas, colors, deltas, background=(0.0, 0.0, 0.0)) -> Composite:
    """Alpha-composite ``(n, P)`` densities and ``(n, P, 3)`` colors front to back."""
    sigmas = np.asarray(sigmas)
    opt = sigmas * deltas
    alpha = -np.expm1(-opt)
    trans = np.ones((sigmas.shape[0], sigmas.shape[1] + 1), dtype=sigmas.dtype)
    np.cumprod(np.exp(-opt), axis=1, out=trans[:, 1:])
    weights = trans[:, :-1] * alpha
    color = np.einsum("np,npc->nc", weights, colors) + trans[:, -1:] * np.asarray(background, sigmas.dtype)
    return Composite(color, weights, trans)


def composite_ray(samples: SampleBatch, background=(0.0, 0.0, 0.0), debug: bool = False):
    out = composite(samples.sigmas[None], samples.colors[None], samples.deltas[None], background)
    if debug:
        return out.color[0], out.weights[0], out.transmittance[0, -1]
    return out.color[0]


def composite_backprop(comp: Composite, sigmas, colors, deltas, upstream, background=(0.0, 0.0, 0.0)):
    """Gradients of ``sum(upstream * color)`` with respect to densities and colors.

    ``d/dsigma_k = delta_k * (T_{k+1} g·c_k - g·S_k)`` where ``S_k`` is the
    radiance arriving from behind sample ``k`` (later samples plus background).
    """
    upstream = np.asarray(upstream)
    d_colors = comp.weights[:, :, None] * upstream[:, None, :]
    gc = np.einsum("npc,nc->np", colors, upstream)  # g·c_k
    gbg = upstream @ np.asarray(background, dtype=upstream.dtype)  # g·bg
    wgc = comp.weights * gc
    # S_k: suffix sum over m > k of w_m g·c_m, plus T_{P+1} g·bg
    suffix = np.cumsum(wgc[:, ::-1], axis=1)[:, ::-1]
    behind = np.empty_like(suffix)
    behind[:, :-1] = suffix[:, 1:]
    behind[:, -1] = 0.0
    behind += (comp.transmittance[:, -1] * gbg)[:, None]
    d_sigmas = deltas * (comp.transmittance[:, 1:] * gc - behind)
    return d_sigmas, d_colors


# --------------------------------------------------------------------------
# frames


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) in [0,1]
    index: int = 0
    stats: dict = field(default_factory=dict)
    keypoints: np.ndarray | None = None  # (L, 2) normalized, when known

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


QueryFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, int]]


def render_rays(query: QueryFn, rays: RayBatch, near: float, far: float, P: int, *,
                mode: str = "stratified", seed: int = 0, frame: int = 0, pixel_ids=None,
                background=(0.0, 0.0, 0.0), workers: int = 1, dtype=np.float64):
    """Composite colors for every ray; returns ``(colors (n, 3), clamped points)``.

    ``query(points, dirs, ray_index)`` returns densities, colors and a clamp
    count; ``ray_index`` gives each point's ray so callers can look up per-ray
    conditioning.
    """
    n = len(rays)
    if pixel_ids is None:
        pixel_ids = np.arange(n)
    out = np.empty((n, 3), dtype=dtype)
    chunks = [slice(s, min(s + CHUNK_RAYS, n)) for s in range(0, n, CHUNK_RAYS)]

    def run(sl):
        depths, deltas = sample_depths(sl.stop - sl.start, near, far, P, mode, seed, frame, pixel_ids[sl])
        depths = depths.astype(dtype)
        deltas = deltas.astype(dtype)
        o = rays.origins[sl].astype(dtype)
        d = rays.directions[sl].astype(dtype)
        ray_index = np.arange(sl.start, sl.stop)
        pts = (o[:, None, :] + depths[:, :, None] * d[:, None, :]).reshape(-1, 3)
        dirs = np.repeat(d, P, axis=0)
        sigma, rgb, clamped = query(pts, dirs, np.repeat(ray_index, P))
        m = sl.stop - sl.start
        comp = composite(sigma.reshape(m, P), rgb.reshape(m, P, 3), deltas, background)
        out[sl] = comp.color
        return clamped

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            clamped = sum(pool.map(run, chunks))
    else:
        clamped = sum(run(sl) for sl in chunks)
    return out, int(clamped)


def render_frame(model, camera: Camera, e_a, blink: float, P: int = 64, seed: int = 0,
                 frame_index: int = 0, *, mode: str = "stratified", background=(0.0, 0.0, 0.0),
                 workers: int = 1, dtype=np.float64) -> Frame:
    """Render the intermediate motion frame for one raw audio embedding and blink value."""
    t0 = time.perf_counter()
    if model.grid.params.dtype != dtype:
        model = model.astype(dtype)
    e_norm = model.normalize_audio(e_a)
    rays = generate_rays(camera)

    def query(pts, dirs, _rays):
        return model.query(pts, dirs, e_norm, blink)

    try:
        colors, clamped = render_rays(query, rays, camera.near, camera.far, P, mode=mode, seed=seed,
                                      frame=frame_index, background=background, workers=workers,
                                      dtype=dtype)
    except ValueError as exc:
        raise ValueError(f"frame {frame_index}: {exc}") from exc
    image = np.clip(colors.reshape(camera.height, camera.width, 3).astype(np.float64), 0.0, 1.0)
    stats = {
        "frame_index": frame_index,
        "wall_ms": (time.perf_counter() - t0) * 1e3,
        "clamped_points": clamped,
        "P": P,
        "H": camera.height,
        "W": camera.width,
    }
    return Frame(image, frame_index, stats)
