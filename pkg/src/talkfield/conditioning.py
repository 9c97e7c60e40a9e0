"""Audio features, feature files and the region-attention gates for audio and blink."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .core import Mlp
from .errors import (
    BadMagicError,
    DimensionMismatchError,
    FormatError,
    TruncatedPayloadError,
    VersionMismatchError,
)

LOG_FLOOR = 1e-10


@dataclass
class AudioTrack:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def num_frames(self, fps: float) -> int:
        return frame_count(len(self.samples), self.sample_rate, fps)


def frame_count(n_samples: int, sample_rate: int, fps: float) -> int:
    """``ceil(T * fps)`` evaluated exactly (``T = n_samples / sample_rate``)."""
    return math.ceil(Fraction(n_samples) * Fraction(fps) / sample_rate)


@dataclass
class AudioEmbeddingSequence:
    embeddings: np.ndarray  # (n_frames, d_a)
    fps: float
    blink: np.ndarray | None = None  # optional per-frame eyeblink in [0,1]

    def __post_init__(self):
        self.embeddings = np.atleast_2d(self.embeddings)
        if self.blink is not None:
            self.blink = np.asarray(self.blink)
            if self.blink.shape != (len(self.embeddings),):
                raise ValueError("blink signal needs one value per frame")

    @property
    def d_a(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self):
        return len(self.embeddings)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale, shape ``(n_filters, n_fft//2+1)``."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def _band_energies(windows: np.ndarray, sample_rate: int, n_filters: int) -> np.ndarray:
    width = windows.shape[1]
    n_fft = 1 << max(1, math.ceil(math.log2(width)))
    spec = np.fft.rfft(windows * np.hanning(width), n=n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    return power @ mel_filterbank(n_filters, n_fft, sample_rate).T


def frame_windows(track: AudioTrack, fps: float) -> tuple[np.ndarray, int, np.ndarray]:
    """Window start offsets, window width and per-frame center samples.

    Frame ``i`` is centred on sample ``floor((i + 0.5) * sample_rate / fps)`` and
    spans ``2 / fps`` seconds.
    """
    n = track.num_frames(fps)
    hop = track.sample_rate / fps
    width = max(4, int(round(2.0 * hop)))
    centers = np.floor((np.arange(n) + 0.5) * hop).astype(np.int64)
    starts = centers - width // 2
    return starts, width, centers


def featurize_audio(track: AudioTrack, fps: float, d_a: int = 32) -> AudioEmbeddingSequence:
    """Per-video-frame audio embedding.

    The first ``d_a/2`` entries are log mel-band energies of the Hann-weighted
    window; the last ``d_a/2`` are the change in log energy from the left half of
    that window to its right half. Each embedding only sees its own window.
    """
    if len(track.samples) == 0:
        raise ValueError("empty audio")
    if track.sample_rate < 8000:
        raise ValueError(f"sample rate {track.sample_rate} Hz is below 8000 Hz")
    if not 1 <= fps <= 120:
        raise ValueError(f"fps {fps} outside [1, 120]")
    if d_a <= 0 or d_a % 2:
        raise ValueError(f"d_a must be a positive multiple of 2, got {d_a}")
    n_filters = d_a // 2
    starts, width, _ = frame_windows(track, fps)
    pad = width
    padded = np.concatenate([np.zeros(pad), track.samples, np.zeros(pad + width)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, width)[starts + pad]
    half = width // 2
    full = np.log(_band_energies(windows, track.sample_rate, n_filters) + LOG_FLOOR)
    left = np.log(_band_energies(windows[:, :half], track.sample_rate, n_filters) + LOG_FLOOR)
    right = np.log(_band_energies(windows[:, width - half :], track.sample_rate, n_filters) + LOG_FLOOR)
    return AudioEmbeddingSequence(np.concatenate([full, right - left], axis=1), fps)


def full_window_frames(track: AudioTrack, fps: float) -> np.ndarray:
    """Indices of frames whose analysis window lies entirely inside the track."""
    starts, width, _ = frame_windows(track, fps)
    return np.flatnonzero((starts >= 0) & (starts + width <= len(track.samples)))


# --------------------------------------------------------------------------
# feature file: "LNAF", u32 version, u32 n_frames, u32 d_a, f32 fps, u32 flags,
# then n_frames*d_a f32 LE row-major; if flags bit 0, n_frames f32 blink values.

FEATURE_MAGIC = b"LNAF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIIfI")


def write_feature_file(path, seq: AudioEmbeddingSequence) -> None:
    flags = 1 if seq.blink is not None else 0
    n, d_a = seq.embeddings.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d_a, seq.fps, flags))
        fh.write(np.ascontiguousarray(seq.embeddings, dtype="<f4").tobytes())
        if flags:
            fh.write(np.ascontiguousarray(seq.blink, dtype="<f4").tobytes())


def read_feature_file(path, expect_d_a: int | None = None) -> AudioEmbeddingSequence:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"bad magic in feature file {path}")
    if len(data) < _FEATURE_HEADER.size:
        raise TruncatedPayloadError(f"feature file {path} has a truncated header")
    _, version, n, d_a, fps, flags = _FEATURE_HEADER.unpack_from(data)
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{path}: feature file version {version}, expected {FEATURE_VERSION}")
    if expect_d_a is not None and d_a != expect_d_a:
        raise DimensionMismatchError("d_a", d_a, expect_d_a)
    need = n * d_a * 4 + (n * 4 if flags & 1 else 0)
    body = data[_FEATURE_HEADER.size :]
    if len(body) < need:
        raise TruncatedPayloadError(
            f"feature file {path} declares {n} frames but payload holds {len(body)} of {need} bytes"
        )
    emb = np.frombuffer(body, dtype="<f4", count=n * d_a).reshape(n, d_a).astype(np.float32)
    blink = None
    if flags & 1:
        blink = np.frombuffer(body, dtype="<f4", count=n, offset=n * d_a * 4).astype(np.float32)
    return AudioEmbeddingSequence(emb, float(fps), blink)


# --------------------------------------------------------------------------
# region attention


@dataclass
class GateNets:
    mlp_a: Mlp  # 3*d_h -> d_a, sigmoid output
    mlp_b: Mlp  # 3*d_h -> 1, sigmoid output
    blink_clamps: int = field(default=0, compare=False)

    def __post_init__(self):
        for name, net in (("mlp_a", self.mlp_a), ("mlp_b", self.mlp_b)):
            if net.output_activation != "sigmoid":
                raise ValueError(f"{name} must end in a sigmoid")
        if self.mlp_b.n_out != 1 or self.mlp_a.n_in != self.mlp_b.n_in:
            raise ValueError("mlp_b must map the tri-plane feature to one scalar")

    @classmethod
    def init(cls, feat_dim: int, d_a: int, rng: np.random.Generator, hidden: int = 16) -> "GateNets":
        sizes_a = [feat_dim, hidden, d_a] if hidden else [feat_dim, d_a]
        sizes_b = [feat_dim, hidden, 1] if hidden else [feat_dim, 1]
        return cls(
            Mlp.init(sizes_a, rng, "relu", "sigmoid"),
            Mlp.init(sizes_b, rng, "relu", "sigmoid"),
        )

    @property
    def d_a(self) -> int:
        return self.mlp_a.n_out

    def parameters(self, prefix: str = "gates.") -> list[tuple[str, np.ndarray]]:
        return self.mlp_a.parameters(prefix + "mlp_a.") + self.mlp_b.parameters(prefix + "mlp_b.")

    def astype(self, dtype) -> "GateNets":
        return GateNets(self.mlp_a.astype(dtype), self.mlp_b.astype(dtype))


def condition_audio(gates: GateNets, f_x, e_a) -> tuple[np.ndarray, np.ndarray]:
    """Spatially gated audio embedding ``v_a(x) * e_a``; returns ``(gated, v_a)``.

    Works on single vectors or on row batches (``e_a`` broadcasts against rows).
    """
    e_a = np.asarray(e_a)
    if e_a.shape[-1] != gates.d_a:
        raise ValueError(f"audio embedding has size {e_a.shape[-1]}, gates expect {gates.d_a}")
    v_a = gates.mlp_a(f_x)
    return v_a * e_a, v_a


def condition_blink(gates: GateNets, f_x, blink) -> tuple[np.ndarray, np.ndarray]:
    """Spatially weighted blink ``v_b(x) * B``; returns ``(weighted, v_b)`` with the
    trailing unit axis dropped. Out-of-range ``B`` is clamped and counted."""
    dtype = np.result_type(np.asarray(f_x).dtype, np.float32)
    b = np.asarray(blink, dtype=dtype)
    bad = (b < 0.0) | (b > 1.0)
    if np.any(bad):
        gates.blink_clamps += int(np.count_nonzero(bad))
        b = np.clip(b, 0.0, 1.0)
    v_b = gates.mlp_b(f_x)[..., 0]
    return v_b * b, v_b

