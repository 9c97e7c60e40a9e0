"""Multiresolution 2D hash feature planes and the concatenated tri-plane encoding.

All tables of a grid live in one flat ``(total_entries, feature_dim)`` buffer,
ordered plane (xy, yz, xz) then level (coarse to fine). Each ``HashLevel.entries``
is a view into that buffer, so the buffer doubles as the checkpoint payload and
as the single array the optimizer updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

PRIME_I = 1
PRIME_J = 2654435761
PLANES = ("xy", "yz", "xz")
# which normalized coordinates feed each plane
PLANE_AXES = np.array([[0, 1], [1, 2], [0, 2]], dtype=np.int64)


def hash_cell(table_size: int, resolution: int, i: int, j: int) -> int:
    """Table index of grid vertex ``(i, j)``.

    Dense addressing ``i + j * resolution`` when the whole grid fits in the
    table, otherwise ``(i * 1) XOR (j * 2654435761) mod table_size``.
    """
    if resolution * resolution <= table_size:
        return i + j * resolution
    return ((i * PRIME_I) ^ ((j * PRIME_J) & 0xFFFFFFFF)) % table_size


@dataclass
class HashLevel:
    resolution: int  # vertices per axis; coordinates in [0,1] scale by resolution - 1
    table_size: int
    entries: np.ndarray  # (table_size, feature_dim) view into the grid buffer

    @property
    def dense(self) -> bool:
        return self.resolution * self.resolution <= self.table_size

    def index(self, i: int, j: int) -> int:
        return hash_cell(self.table_size, self.resolution, i, j)


@dataclass
class FeaturePlane:
    plane_id: str
    levels: list[HashLevel]
    feature_dim: int

    @property
    def d_h(self) -> int:
        return self.feature_dim * len(self.levels)


def _level_table_size(resolution: int, log2_max: int) -> int:
    need = 1 << int(np.ceil(np.log2(resolution * resolution)))
    return min(need, 1 << log2_max)


@dataclass
class TriPlaneGrid:
    resolutions: tuple[int, ...]
    feature_dim: int
    table_sizes: tuple[int, ...]
    params: np.ndarray  # flat buffer, see module docstring
    bbox: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (-1.0, -1.0, -1.0),
        (1.0, 1.0, 1.0),
    )
    planes: dict[str, FeaturePlane] = field(init=False, repr=False)

    def __post_init__(self):
        res = list(self.resolutions)
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError(f"level resolutions must increase strictly, got {res}")
        if min(res) < 2:
            raise ValueError("each level needs at least 2 vertices per axis")
        for t in self.table_sizes:
            if t <= 0 or t & (t - 1):
                raise ValueError(f"table size {t} is not a power of two")
        total = 3 * sum(self.table_sizes)
        if self.params.shape != (total, self.feature_dim):
            raise ValueError(
                f"parameter buffer has shape {self.params.shape}, expected {(total, self.feature_dim)}"
            )
        self._res = np.asarray(self.resolutions, dtype=np.int64)
        self._tsize = np.asarray(self.table_sizes, dtype=np.int64)
        offs = np.zeros((3, len(res)), dtype=np.int64)
        start = 0
        self.planes = {}
        for p, pid in enumerate(PLANES):
            levels = []
            for lv, (r, t) in enumerate(zip(self.resolutions, self.table_sizes)):
                offs[p, lv] = start
                levels.append(HashLevel(r, t, self.params[start : start + t]))
                start += t
            self.planes[pid] = FeaturePlane(pid, levels, self.feature_dim)
        self._offsets = offs
        lo, hi = np.asarray(self.bbox[0], float), np.asarray(self.bbox[1], float)
        if np.any(hi <= lo):
            raise ValueError("bounding box must have hi > lo on every axis")
        self._lo, self._span = lo, hi - lo

    @classmethod
    def create(
        cls,
        resolutions=(16, 32, 64, 128),
        feature_dim: int = 2,
        log2_table_size: int = 14,
        bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
        rng: np.random.Generator | None = None,
        init_scale: float = 1e-4,
    ) -> "TriPlaneGrid":
        sizes = tuple(_level_table_size(r, log2_table_size) for r in resolutions)
        total = 3 * sum(sizes)
        if rng is None:
            params = np.zeros((total, feature_dim))
        else:
            params = rng.uniform(-init_scale, init_scale, size=(total, feature_dim))
        bbox = (tuple(map(float, bbox[0])), tuple(map(float, bbox[1])))
        return cls(tuple(resolutions), feature_dim, sizes, params, bbox)

    @property
    def d_h(self) -> int:
        return self.feature_dim * len(self.resolutions)

    @property
    def out_dim(self) -> int:
        return 3 * self.d_h

    @property
    def plane_xy(self) -> FeaturePlane:
        return self.planes["xy"]

    @property
    def plane_yz(self) -> FeaturePlane:
        return self.planes["yz"]

    @property
    def plane_xz(self) -> FeaturePlane:
        return self.planes["xz"]

    def with_params(self, params: np.ndarray) -> "TriPlaneGrid":
        return TriPlaneGrid(self.resolutions, self.feature_dim, self.table_sizes, params, self.bbox)

    def astype(self, dtype) -> "TriPlaneGrid":
        return self.with_params(self.params.astype(dtype))

    def normalize(self, points: np.ndarray) -> tuple[np.ndarray, int]:
        """Map scene points into the unit cube; returns clamped coordinates and the
        number of points that fell outside the box."""
        pts = np.asarray(points, dtype=self.params.dtype)
        u = np.empty(pts.shape, dtype=self.params.dtype)
        n_clamped = _normalize_kernel(pts.reshape(-1, 3), self._lo.astype(pts.dtype), self._span.astype(pts.dtype),
                                      u.reshape(-1, 3))
        return u, int(n_clamped)

    def encode(self, points: np.ndarray) -> tuple[np.ndarray, int]:
        """Tri-plane features for ``(n, 3)`` scene points: ``H_xy ⊕ H_yz ⊕ H_xz``."""
        pts = np.atleast_2d(points)
        u, n_clamped = self.normalize(pts)
        out = np.empty((u.shape[0], self.out_dim), dtype=self.params.dtype)
        _encode_kernel(
            np.ascontiguousarray(u), self.params, self._res, self._tsize, self._offsets, PLANE_AXES, out
        )
        return out, n_clamped

    def backprop(self, points: np.ndarray, upstream: np.ndarray, out: np.ndarray | None = None):
        """Accumulate d(sum(upstream * features))/d(tables) into a dense buffer.

        Contributions are added point by point in input order, so the result does
        not depend on how callers batch or schedule the points.
        """
        pts = np.atleast_2d(points)
        upstream = np.atleast_2d(upstream)
        if upstream.shape != (pts.shape[0], self.out_dim):
            raise ValueError(
                f"upstream has shape {upstream.shape}, expected {(pts.shape[0], self.out_dim)}"
            )
        u, _ = self.normalize(pts)
        if out is None:
            out = np.zeros_like(self.params)
        _backprop_kernel(
            np.ascontiguousarray(u),
            np.ascontiguousarray(upstream, dtype=self.params.dtype),
            self._res,
            self._tsize,
            self._offsets,
            PLANE_AXES,
            out,
        )
        return out

    def sparse_backprop(self, points, upstream) -> dict[tuple[str, int], tuple[np.ndarray, np.ndarray]]:
        """Gradient restricted to touched entries, keyed by ``(plane_id, level)``.

        Values are ``(indices, rows)`` with indices sorted and unique.
        """
        dense = self.backprop(points, upstream)
        u, _ = self.normalize(np.atleast_2d(points))
        out = {}
        for p, pid in enumerate(PLANES):
            uv = u[:, PLANE_AXES[p]]
            for lv, level in enumerate(self.planes[pid].levels):
                idx = np.unique(_corner_indices(level, uv).ravel())
                start = self._offsets[p, lv]
                out[(pid, lv)] = (idx, dense[start + idx])
        return out


def _corner_indices(level: HashLevel, uv: np.ndarray) -> np.ndarray:
    r = level.resolution
    pos = uv * (r - 1)
    i = np.minimum(np.floor(pos[:, 0]).astype(np.int64), r - 2)
    j = np.minimum(np.floor(pos[:, 1]).astype(np.int64), r - 2)
    corners = [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)]
    if level.dense:
        return np.stack([ci + cj * r for ci, cj in corners], axis=1)
    return np.stack(
        [((ci * PRIME_I) ^ ((cj * PRIME_J) & 0xFFFFFFFF)) % level.table_size for ci, cj in corners],
        axis=1,
    )


@numba.njit(cache=True, nogil=True, inline="always")
def _corners(x, y, r, t, base):
    """Top-left cell and corner table rows for one lookup at lattice coords (x, y)."""
    i = min(int(x), r - 2)
    j = min(int(y), r - 2)
    if r * r <= t:
        k00 = base + i + j * r
        return i, j, k00, k00 + 1, k00 + r, k00 + r + 1
    hj0 = (j * 2654435761) & 0xFFFFFFFF
    hj1 = ((j + 1) * 2654435761) & 0xFFFFFFFF
    return (i, j, base + (i ^ hj0) % t, base + ((i + 1) ^ hj0) % t,
            base + (i ^ hj1) % t, base + ((i + 1) ^ hj1) % t)


@numba.njit(cache=True, nogil=True)
def _normalize_kernel(pts, lo, span, u):
    n_clamped = 0
    for p in range(pts.shape[0]):
        outside = False
        for c in range(3):
            v = (pts[p, c] - lo[c]) / span[c]
            if v < 0.0:
                v = 0.0
                outside = True
            elif v > 1.0:
                v = 1.0
                outside = True
            u[p, c] = v
        if outside:
            n_clamped += 1
    return n_clamped


# Both kernels loop level-outer: one (plane, level) table block stays hot in
# cache while every point reads it. Blocks are disjoint, so the backward pass
# still accumulates each entry in point order.


@numba.njit(cache=True, nogil=True)
def _encode_kernel(u, table, res, tsize, offsets, axes, out):
    n = u.shape[0]
    n_lv = res.shape[0]
    f_dim = table.shape[1]
    for pl in range(3):
        ax0 = axes[pl, 0]
        ax1 = axes[pl, 1]
        for lv in range(n_lv):
            r = res[lv]
            t = tsize[lv]
            base = offsets[pl, lv]
            col = (pl * n_lv + lv) * f_dim
            s = r - 1.0
            for p in range(n):
                x = u[p, ax0] * s
                y = u[p, ax1] * s
                i, j, k00, k10, k01, k11 = _corners(x, y, r, t, base)
                a = x - i
                b = y - j
                w00 = (1.0 - a) * (1.0 - b)
                w10 = a * (1.0 - b)
                w01 = (1.0 - a) * b
                w11 = a * b
                for f in range(f_dim):
                    out[p, col + f] = (
                        w00 * table[k00, f] + w10 * table[k10, f] + w01 * table[k01, f] + w11 * table[k11, f]
                    )


@numba.njit(cache=True, nogil=True)
def _backprop_kernel(u, upstream, res, tsize, offsets, axes, grad):
    n = u.shape[0]
    n_lv = res.shape[0]
    f_dim = grad.shape[1]
    for pl in range(3):
        ax0 = axes[pl, 0]
        ax1 = axes[pl, 1]
        for lv in range(n_lv):
            r = res[lv]
            t = tsize[lv]
            base = offsets[pl, lv]
            col = (pl * n_lv + lv) * f_dim
            s = r - 1.0
            for p in range(n):
                x = u[p, ax0] * s
                y = u[p, ax1] * s
                i, j, k00, k10, k01, k11 = _corners(x, y, r, t, base)
                a = x - i
                b = y - j
                w00 = (1.0 - a) * (1.0 - b)
                w10 = a * (1.0 - b)
                w01 = (1.0 - a) * b
                w11 = a * b
                for f in range(f_dim):
                    g = upstream[p, col + f]
                    grad[k00, f] += w00 * g
                    grad[k10, f] += w10 * g
                    grad[k01, f] += w01 * g
                    grad[k11, f] += w11 * g


def plane_encode(plane: FeaturePlane, u: float, v: float) -> np.ndarray:
    """Bilinearly interpolated features of one plane at ``(u, v)`` in [0,1]²."""
    u = min(max(float(u), 0.0), 1.0)
    v = min(max(float(v), 0.0), 1.0)
    parts = []
    for level in plane.levels:
        r = level.resolution
        x, y = u * (r - 1), v * (r - 1)
        i = min(int(np.floor(x)), r - 2)
        j = min(int(np.floor(y)), r - 2)
        a, b = x - i, y - j
        e = level.entries
        parts.append(
            (1 - a) * (1 - b) * e[level.index(i, j)]
            + a * (1 - b) * e[level.index(i + 1, j)]
            + (1 - a) * b * e[level.index(i, j + 1)]
            + a * b * e[level.index(i + 1, j + 1)]
        )
    return np.concatenate(parts)


def triplane_encode(grid: TriPlaneGrid, x: float, y: float, z: float) -> np.ndarray:
    feats, _ = grid.encode(np.array([[x, y, z]], dtype=float))
    return feats[0]


def triplane_backprop(grid: TriPlaneGrid, point, upstream):
    """Sparse table gradients for a single query point."""
    return grid.sparse_backprop(np.asarray(point, float)[None], np.asarray(upstream, float)[None])
