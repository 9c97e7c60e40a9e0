"""Keypoint-driven face replacement.

Keypoints are ``(L, 2)`` arrays in normalized image coordinates (u right, v down).
Pixel ``(row, col)`` has its center at ``((col + 0.5) / W, (row + 0.5) / H)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Mlp
from .errors import DegenerateLandmarksError, KeypointsRequiredError
from .renderer import Frame


@dataclass
class MotionParams:
    scale: float
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    deltas: np.ndarray  # (L, 3) expression offsets, applied before rotation
    canonical: np.ndarray  # (L, 3)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, float)
        self.translation = np.asarray(self.translation, float)
        self.deltas = np.asarray(self.deltas, float)
        self.canonical = np.asarray(self.canonical, float)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if self.deltas.shape != self.canonical.shape or self.canonical.shape[1:] != (3,):
            raise ValueError("deltas and canonical keypoints must both be (L, 3)")

    @property
    def n_keypoints(self) -> int:
        return len(self.canonical)

    @classmethod
    def identity(cls, canonical) -> "MotionParams":
        canonical = lift(canonical)
        return cls(1.0, np.eye(3), np.zeros(3), np.zeros_like(canonical), canonical)


def lift(kp) -> np.ndarray:
    """2D keypoints to 3D with zero depth; 3D input passes through."""
    kp = np.asarray(kp, dtype=float)
    if kp.ndim != 2 or kp.shape[1] not in (2, 3):
        raise ValueError(f"keypoints must be (L, 2) or (L, 3), got {kp.shape}")
    if kp.shape[1] == 3:
        return kp
    return np.column_stack([kp, np.zeros(len(kp))])


def similarity_align(src, dst) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares ``s, R, t`` with ``dst ≈ s * R @ src + t`` (Umeyama).

    Points may be 2D or 3D; 2D input yields a rotation about the depth axis.
    """
    src, dst = lift(src), lift(dst)
    if src.shape != dst.shape:
        raise ValueError(f"keypoint counts differ: {len(src)} vs {len(dst)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    sv_src = np.linalg.svd(xs, compute_uv=False)
    if len(src) < 3 or np.sum(sv_src > 1e-9 * max(sv_src[0], 1e-300)) < 2:
        raise DegenerateLandmarksError("degenerate landmarks: configuration has rank < 2")
    cov = xd.T @ xs / len(src)
    u, sig, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    s = float(np.sum(sig * d) / var_s)
    t = mu_d - s * rot @ mu_s
    return s, rot, t


def extract_motion(o_frame: Frame, ref_frame: Frame, kp_source=None, kp_ref=None) -> MotionParams:
    """Similarity pose of the motion frame relative to the reference, plus the
    residual expression offsets in the reference frame."""
    if kp_source is None:
        kp_source = o_frame.keypoints
    if kp_ref is None:
        kp_ref = ref_frame.keypoints
    if kp_source is None or kp_ref is None:
        raise KeypointsRequiredError("keypoints required: frame carries no scene keypoints")
    src, ref = lift(kp_source), lift(kp_ref)
    s, rot, t = similarity_align(ref, src)
    deltas = (src - t) @ rot / s - ref
    return MotionParams(s, rot, t, deltas, ref)


def transform_keypoints(motion: MotionParams) -> tuple[np.ndarray, int]:
    """Animated keypoints ``s R (x_c + delta) + t``, orthographically projected and
    clamped to the unit square. Returns ``(keypoints, n_clamped)``."""
    pts = motion.scale * (motion.canonical + motion.deltas) @ motion.rotation.T + motion.translation
    uv = pts[:, :2]
    outside = np.any((uv < 0.0) | (uv > 1.0), axis=1)
    return np.clip(uv, 0.0, 1.0), int(np.count_nonzero(outside))


def _to_pixels(kp, height: int, width: int) -> np.ndarray:
    return np.asarray(kp, float) * (width, height) - 0.5


def sample_bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``image`` at pixel coordinates ``(x=col, y=row)`` with edge clamping."""
    h, w = image.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = x - x0
    ay = y - y0
    if image.ndim == 3:
        ax, ay = ax[..., None], ay[..., None]
    return (
        (1 - ax) * (1 - ay) * image[y0, x0]
        + ax * (1 - ay) * image[y0, x1]
        + (1 - ax) * ay * image[y1, x0]
        + ax * ay * image[y1, x1]
    )


def face_mask(keypoints, height: int, width: int, falloff: float = 0.1, power: float = 4.0) -> np.ndarray:
    """Super-ellipse fitted to the keypoint bounding box; 1 inside, smooth decay to 0
    across a band ``falloff`` times the box size."""
    px = _to_pixels(keypoints, height, width)
    lo, hi = px.min(axis=0), px.max(axis=0)
    center = 0.5 * (lo + hi)
    semi = np.maximum(0.5 * (hi - lo), 0.5)
    rows, cols = np.mgrid[0:height, 0:width]
    r = (np.abs((cols - center[0]) / semi[0]) ** power + np.abs((rows - center[1]) / semi[1]) ** power) ** (1 / power)
    t = np.clip((r - 1.0) / falloff, 0.0, 1.0)
    return 1.0 - t * t * (3.0 - 2.0 * t)


def stitch_keypoints(x_p, x_ref, mask: np.ndarray) -> np.ndarray:
    """Blend animated and reference keypoints by the mask value at the reference
    keypoint: ``m * x_p + (1 - m) * x_ref``."""
    x_p, x_ref = np.asarray(x_p, float), np.asarray(x_ref, float)
    if x_p.shape != x_ref.shape:
        raise ValueError(f"keypoint counts differ: {len(x_p)} vs {len(x_ref)}")
    h, w = mask.shape
    px = _to_pixels(x_ref, h, w)
    m = sample_bilinear(mask, px[:, 0], px[:, 1])[:, None]
    return m * x_p + (1.0 - m) * x_ref


def build_warp(src, dst, height: int, width: int, bandwidth: float | None = None) -> np.ndarray:
    """Dense ``(H, W, 2)`` pixel displacement ``(dx, dy)`` interpolating keypoint
    motion with normalized Gaussian weights centered on the source keypoints.

    The field is written as ``D_0 + sum_i w_i (D_i - D_0)``, equal to
    ``sum_i w_i D_i`` because the weights sum to one, so identical keypoint
    displacements give an exactly constant field.
    """
    if bandwidth is None:
        bandwidth = 0.08 * min(height, width)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    src_px = _to_pixels(src, height, width)
    disp = (np.asarray(dst, float) - np.asarray(src, float)) * (width, height)
    if len(src_px) == 0:
        raise ValueError("need at least one keypoint pair")
    rel = disp - disp[0]
    if not np.any(rel):
        return np.broadcast_to(disp[0], (height, width, 2)).copy()
    ys, xs = np.mgrid[0:height, 0:width]
    d2 = (xs[..., None] - src_px[:, 0]) ** 2 + (ys[..., None] - src_px[:, 1]) ** 2
    logits = -d2 / (2.0 * bandwidth * bandwidth)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return disp[0] + w @ rel


def apply_warp(frame: Frame, field: np.ndarray) -> Frame:
    """Backward warp: ``out(p) = in(p - field(p))`` with bilinear sampling."""
    img = frame.image
    h, w = img.shape[:2]
    if field.shape != (h, w, 2):
        raise ValueError(f"warp field {field.shape} does not match frame {(h, w)}")
    if not np.any(field):
        return Frame(img.copy(), frame.index, dict(frame.stats), frame.keypoints)
    ys, xs = np.mgrid[0:h, 0:w]
    out = sample_bilinear(img, xs - field[..., 0], ys - field[..., 1])
    return Frame(out, frame.index, dict(frame.stats), frame.keypoints)


@dataclass
class ResidualDecoder:
    """Per-pixel refinement from each pixel's 3x3 neighborhood; predicts an RGB residual.

    Initialized with a zero output layer so the residual is exactly zero.
    """

    net: Mlp

    @classmethod
    def identity(cls, rng: np.random.Generator, hidden: int = 16) -> "ResidualDecoder":
        net = Mlp.init([27, hidden, hidden, 3], rng, "relu", "identity")
        net.weights[-1][:] = 0.0
        return cls(net)

    def parameters(self, prefix: str = "decoder.") -> list[tuple[str, np.ndarray]]:
        return self.net.parameters(prefix)

    @staticmethod
    def neighborhoods(image: np.ndarray) -> np.ndarray:
        h, w = image.shape[:2]
        pad = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
        patches = [pad[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)]
        return np.concatenate(patches, axis=-1).reshape(h * w, 27)

    def residual(self, image: np.ndarray) -> np.ndarray:
        return self.net(self.neighborhoods(image)).reshape(image.shape)


def synthesize(o_frame: Frame, ref_frame: Frame, x_p, kp_motion_src, decoder: ResidualDecoder,
               mask: np.ndarray, bandwidth: float | None = None) -> Frame:
    """Warp the motion frame onto the animated keypoints, paste it into the
    reference through the mask and refine with the decoder."""
    if o_frame.image.shape != ref_frame.image.shape or mask.shape != o_frame.image.shape[:2]:
        raise ValueError("motion frame, reference frame and mask sizes differ")
    h, w = mask.shape
    warped = apply_warp(o_frame, build_warp(kp_motion_src, x_p, h, w, bandwidth)).image
    m = mask[..., None]
    composited = m * warped + (1.0 - m) * ref_frame.image
    out = np.clip(composited + decoder.residual(composited), 0.0, 1.0)
    return Frame(out, o_frame.index, dict(o_frame.stats), np.asarray(x_p, float))


def replace_face(o_frame: Frame, ref_frame: Frame, decoder: ResidualDecoder, kp_source=None,
                 kp_ref=None, bandwidth: float | None = None, mask: np.ndarray | None = None) -> Frame:
    """Motion extraction, keypoint transfer, stitching and synthesis for one frame."""
    kp_source = o_frame.keypoints if kp_source is None else kp_source
    kp_ref = ref_frame.keypoints if kp_ref is None else kp_ref
    motion = extract_motion(o_frame, ref_frame, kp_source, kp_ref)
    x_p, _ = transform_keypoints(motion)
    h, w = o_frame.image.shape[:2]
    if mask is None:
        mask = face_mask(kp_ref, h, w)
    x_s = stitch_keypoints(x_p, kp_ref, mask)
    return synthesize(o_frame, ref_frame, x_s, kp_source, decoder, mask, bandwidth)
