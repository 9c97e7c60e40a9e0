"""Conditioned radiance field: tri-plane features, region-attention gates and a
shared trunk with a softplus density head and a view-dependent sigmoid color head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import GateNets, condition_audio, condition_blink
from .core import Mlp
from .triplane import TriPlaneGrid


@dataclass
class RadianceField:
    """Trunk input: ``f_x (3*d_h) | gated audio (d_a) | gated blink (1)``, relu
    throughout. The density head reads the trunk features; the color head reads
    the trunk features plus the view direction, so density is view-independent.
    """

    trunk: Mlp
    density: Mlp
    color: Mlp
    feat_dim: int
    d_a: int

    def __post_init__(self):
        want = self.feat_dim + self.d_a + 1
        width = self.trunk.n_out
        if self.trunk.n_in != want:
            raise ValueError(f"trunk takes {self.trunk.n_in} inputs, layout needs {want}")
        if self.density.layer_sizes != [width, 1] or self.color.layer_sizes != [width + 3, 3]:
            raise ValueError(
                f"heads {self.density.layer_sizes} / {self.color.layer_sizes} do not fit "
                f"trunk width {width}"
            )

    @property
    def input_width(self) -> int:
        """Total conditioning width ``3*d_h + 3 + d_a + 1`` across both heads."""
        return self.feat_dim + 3 + self.d_a + 1

    @classmethod
    def init(cls, feat_dim: int, d_a: int, rng, hidden=(32, 32)) -> "RadianceField":
        trunk = Mlp.init([feat_dim + d_a + 1, *hidden], rng, "relu", "relu")
        density = Mlp.init([hidden[-1], 1], rng, "relu", "softplus")
        color = Mlp.init([hidden[-1] + 3, 3], rng, "relu", "sigmoid")
        return cls(trunk, density, color, feat_dim, d_a)

    def networks(self, prefix: str = "field.") -> dict[str, Mlp]:
        return {prefix + "trunk.": self.trunk, prefix + "density.": self.density,
                prefix + "color.": self.color}

    def parameters(self, prefix: str = "field.") -> list[tuple[str, np.ndarray]]:
        return [p for pre, net in self.networks(prefix).items() for p in net.parameters(pre)]

    def astype(self, dtype) -> "RadianceField":
        return RadianceField(self.trunk.astype(dtype), self.density.astype(dtype),
                             self.color.astype(dtype), self.feat_dim, self.d_a)

    def heads(self, h, view_dir):
        """Density ``(n,)`` and color ``(n, 3)`` from trunk features ``h``."""
        sigma = self.density(h)[..., 0]
        wc = self.color.weights[0]
        width = h.shape[-1]
        z = h @ wc[:, :width].T
        z += view_dir @ wc[:, width:].T
        z += self.color.biases[0]
        return sigma, self.color.forward_from(z, 0)


def query_field(field: RadianceField, f_x, view_dir, e_a_gated, e_b_gated):
    """Density and color for already-gated conditioning inputs (rows or single vectors)."""
    f_x = np.asarray(f_x)
    view_dir = np.asarray(view_dir)
    e_a_gated = np.asarray(e_a_gated)
    e_b = np.asarray(e_b_gated)[..., None]
    widths = (f_x.shape[-1], view_dir.shape[-1], e_a_gated.shape[-1])
    if widths != (field.feat_dim, 3, field.d_a):
        raise ValueError(f"input widths {widths} do not match layout {(field.feat_dim, 3, field.d_a)}")
    lead = np.broadcast_shapes(f_x.shape[:-1], view_dir.shape[:-1], e_a_gated.shape[:-1],
                               e_b.shape[:-1])
    h = field.trunk(_stack_inputs(lead, f_x, e_a_gated, e_b))
    return field.heads(h, np.broadcast_to(view_dir, lead + (3,)))


def _stack_inputs(lead, *parts):
    return np.concatenate([np.broadcast_to(p, lead + (p.shape[-1],)) for p in parts], axis=-1)


@dataclass
class HeadModel:
    """Everything a checkpoint stores about the neural head.

    ``audio_mean``/``audio_std`` standardize raw audio embeddings before gating.
    """

    grid: TriPlaneGrid
    gates: GateNets
    field: RadianceField
    audio_mean: np.ndarray
    audio_std: np.ndarray

    def __post_init__(self):
        if self.gates.mlp_a.n_in != self.grid.out_dim or self.field.feat_dim != self.grid.out_dim:
            raise ValueError("gate/trunk input widths disagree with the tri-plane feature width")
        if self.gates.d_a != self.field.d_a or self.audio_mean.shape != (self.field.d_a,):
            raise ValueError("d_a disagrees between gates, trunk and audio statistics")

    @classmethod
    def init(cls, rng: np.random.Generator, d_a: int = 32, resolutions=(16, 32, 64, 128),
             feature_dim: int = 2, log2_table_size: int = 14, bbox=((-1, -1, -1), (1, 1, 1)),
             trunk_hidden=(32, 32), gate_hidden: int = 16) -> "HeadModel":
        grid = TriPlaneGrid.create(resolutions, feature_dim, log2_table_size, bbox, rng)
        gates = GateNets.init(grid.out_dim, d_a, rng, gate_hidden)
        field = RadianceField.init(grid.out_dim, d_a, rng, trunk_hidden)
        return cls(grid, gates, field, np.zeros(d_a), np.ones(d_a))

    @property
    def d_a(self) -> int:
        return self.field.d_a

    @property
    def d_h(self) -> int:
        return self.grid.d_h

    def networks(self) -> dict[str, Mlp]:
        return {"gates.mlp_a.": self.gates.mlp_a, "gates.mlp_b.": self.gates.mlp_b,
                **self.field.networks()}

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Stable flat enumeration used by checkpoints and the optimizer."""
        return (
            [("triplane", self.grid.params)]
            + self.gates.parameters()
            + self.field.parameters()
            + [("audio_mean", self.audio_mean), ("audio_std", self.audio_std)]
        )

    def astype(self, dtype) -> "HeadModel":
        return HeadModel(
            self.grid.astype(dtype),
            self.gates.astype(dtype),
            self.field.astype(dtype),
            self.audio_mean.astype(dtype),
            self.audio_std.astype(dtype),
        )

    def normalize_audio(self, e_a):
        return (np.asarray(e_a, dtype=self.audio_mean.dtype) - self.audio_mean) / self.audio_std

    def query(self, points, dirs, e_a, blink):
        """Density, color and clamp count at ``(n, 3)`` points.

        ``e_a`` is a standardized embedding, per point ``(n, d_a)`` or shared ``(d_a,)``;
        ``blink`` is per point or a scalar.
        """
        f, clamped = self.grid.encode(points)
        e_a = np.asarray(e_a, dtype=f.dtype)
        if e_a.ndim == 1 and np.ndim(blink) == 0 and 0.0 <= blink <= 1.0:
            sigma, rgb = self._query_shared(f, np.asarray(dirs, f.dtype), e_a, float(blink))
            return sigma, rgb, clamped
        ga, _ = condition_audio(self.gates, f, e_a)
        gb, _ = condition_blink(self.gates, f, blink)
        h = self.field.trunk(_stack_inputs(f.shape[:-1], f, ga, gb[..., None]))
        sigma, rgb = self.field.heads(h, np.asarray(dirs, f.dtype))
        return sigma, rgb, clamped

    def _query_shared(self, f, dirs, e_a, blink):
        """Same function as the general path for one embedding and blink shared by
        all points. The gating products fold into the trunk's first layer, so the
        concatenated input is never built; zero blink skips the blink gate since
        its contribution is exactly zero."""
        trunk = self.field.trunk
        fd, da = self.grid.out_dim, self.d_a
        w0 = trunk.weights[0]
        v_a = self.gates.mlp_a(f)
        z = f @ w0[:, :fd].T
        z += v_a @ (w0[:, fd : fd + da] * e_a).T
        if blink != 0.0:
            v_b = self.gates.mlp_b(f)
            z += v_b * (w0[:, fd + da] * blink)
        z += trunk.biases[0]
        return self.field.heads(trunk.forward_from(z, 0), dirs)

    # training path ------------------------------------------------------

    def forward_train(self, points, dirs, e_a, blink):
        f, _ = self.grid.encode(points)
        va, cache_a = self.gates.mlp_a.forward_cache(f)
        vb, cache_b = self.gates.mlp_b.forward_cache(f)
        ga = va * e_a
        gb = vb[:, 0] * blink
        h, cache_t = self.field.trunk.forward_cache(_stack_inputs(f.shape[:-1], f, ga, gb[:, None]))
        sig, cache_s = self.field.density.forward_cache(h)
        rgb, cache_c = self.field.color.forward_cache(np.concatenate([h, dirs], axis=-1))
        cache = (points, e_a, blink, cache_a, cache_b, cache_t, cache_s, cache_c)
        return sig[:, 0], rgb, cache

    def backward(self, cache, d_sigma, d_rgb) -> dict[str, np.ndarray]:
        """Parameter gradients of ``sum(d_sigma*sigma) + sum(d_rgb*rgb)``."""
        points, e_a, blink, cache_a, cache_b, cache_t, cache_s, cache_c = cache
        gs = self.field.density.backward(cache_s, np.asarray(d_sigma)[:, None])
        gc = self.field.color.backward(cache_c, d_rgb)
        width = self.field.trunk.n_out
        d_h = gs.input + gc.input[:, :width]
        gt = self.field.trunk.backward(cache_t, d_h)
        d_in = gt.input
        fd = self.grid.out_dim
        d_f = d_in[:, :fd].copy()
        d_ga = d_in[:, fd : fd + self.d_a]
        d_gb = d_in[:, fd + self.d_a]
        g_a = self.gates.mlp_a.backward(cache_a, d_ga * e_a)
        g_b = self.gates.mlp_b.backward(cache_b, (d_gb * blink)[:, None])
        d_f += g_a.input
        d_f += g_b.input
        grads = {"triplane": self.grid.backprop(points, d_f)}
        grads.update(g_a.parameters("gates.mlp_a."))
        grads.update(g_b.parameters("gates.mlp_b."))
        grads.update(gt.parameters("field.trunk."))
        grads.update(gs.parameters("field.density."))
        grads.update(gc.parameters("field.color."))
        return grads
