"""Byte-exact file formats: PPM/PGM images, keypoint text files, WAV input,
render statistics and checkpoints.

Checkpoint layout (little-endian)::

    "LNCK" | u32 version | u32 d_h | u32 d_a | u32 L | u32 n_levels
    | n_levels x (u32 resolution, u32 table_size) | u32 feature_dim
    | u32 n_json | n_json bytes UTF-8 JSON (network layout, bbox, config echo)
    | f64 payload: parameters in ``Checkpoint.parameters()`` order, row-major
    | u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import csv
import json
import struct
import wave
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import AudioTrack, GateNets
from .core import Mlp
from .errors import (
    BadMagicError,
    ChecksumError,
    DimensionMismatchError,
    FormatError,
    MissingFileError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .facerep import ResidualDecoder
from .field import HeadModel, RadianceField
from .renderer import Frame
from .triplane import TriPlaneGrid

# --------------------------------------------------------------------------
# images


def _read_bytes(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"no such file: {p}")
    return p.read_bytes()


def _parse_pnm_header(data: bytes, magic: bytes, path) -> tuple[int, int, int]:
    if data[:2] != magic:
        raise BadMagicError(f"{path}: expected {magic.decode()} image, found {data[:2]!r}")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedPayloadError(f"{path}: truncated header")
        fields.append(data[start:pos])
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported, need 255")
    return width, height, pos + 1


def quantize(values: np.ndarray) -> np.ndarray:
    """[0,1] reals to bytes with round-half-up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def read_image(path) -> Frame:
    data = _read_bytes(path)
    w, h, off = _parse_pnm_header(data, b"P6", path)
    n = w * h * 3
    if len(data) - off < n:
        raise TruncatedPayloadError(f"{path}: pixel data truncated ({len(data) - off} of {n} bytes)")
    pix = np.frombuffer(data, dtype=np.uint8, count=n, offset=off).reshape(h, w, 3)
    return Frame(pix / 255.0)


def write_image(path, frame) -> None:
    img = frame.image if isinstance(frame, Frame) else np.asarray(frame)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(quantize(img).tobytes())


def read_mask(path) -> np.ndarray:
    data = _read_bytes(path)
    w, h, off = _parse_pnm_header(data, b"P5", path)
    if len(data) - off < w * h:
        raise TruncatedPayloadError(f"{path}: pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off).reshape(h, w) / 255.0


def write_mask(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(quantize(mask).tobytes())


# --------------------------------------------------------------------------
# keypoints: first line L, then L lines "u v"


def write_keypoints(path, kp: np.ndarray) -> None:
    kp = np.asarray(kp, float)
    lines = [str(len(kp))] + [f"{u!r} {v!r}" for u, v in kp.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_keypoints(path) -> np.ndarray:
    text = _read_bytes(path).decode().split("\n")
    try:
        n = int(text[0])
        rows = [tuple(float(t) for t in line.split()) for line in text[1 : 1 + n]]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed keypoint file") from exc
    if len(rows) != n or any(len(r) != 2 for r in rows):
        raise TruncatedPayloadError(f"{path}: expected {n} keypoint rows")
    return np.asarray(rows, dtype=float).reshape(n, 2)


def read_blink(path) -> np.ndarray:
    """Per-frame blink values, one float per line."""
    vals = [float(t) for t in _read_bytes(path).decode().split()]
    return np.asarray(vals)


# --------------------------------------------------------------------------
# audio


def read_wav(path) -> AudioTrack:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"no such file: {p}")
    with wave.open(str(p), "rb") as wf:
        width, channels, rate = wf.getsampwidth(), wf.getnchannels(), wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    if width != 2:
        raise FormatError(f"{p}: only 16-bit PCM WAV is supported")
    samples = np.frombuffer(raw, dtype="<i2").reshape(-1, channels).mean(axis=1) / 32768.0
    return AudioTrack(samples, rate)


def write_wav(path, track: AudioTrack) -> None:
    pcm = np.clip(np.round(track.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(track.sample_rate)
        wf.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# render stats

STATS_FIELDS = ("frame_index", "wall_ms", "clamped_points", "P", "H", "W")


def write_render_stats(path, frames) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_FIELDS)
        for f in frames:
            stats = f.stats if isinstance(f, Frame) else f
            writer.writerow([stats[k] for k in STATS_FIELDS])


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"LNCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: HeadModel
    decoder: ResidualDecoder
    config: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION
    n_keypoints: int = 68

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return self.model.parameters() + self.decoder.parameters()


def _net_layout(net: Mlp) -> dict:
    return {"sizes": net.layer_sizes, "hidden": net.hidden_activation, "output": net.output_activation}


def _empty_net(layout: dict) -> Mlp:
    s = layout["sizes"]
    return Mlp([np.zeros((o, i)) for i, o in zip(s[:-1], s[1:])], [np.zeros(o) for o in s[1:]],
               layout["hidden"], layout["output"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    m = ckpt.model
    grid = m.grid
    meta = {
        "bbox": [list(grid.bbox[0]), list(grid.bbox[1])],
        "mlp_a": _net_layout(m.gates.mlp_a),
        "mlp_b": _net_layout(m.gates.mlp_b),
        "trunk": _net_layout(m.field.trunk),
        "density": _net_layout(m.field.density),
        "color": _net_layout(m.field.color),
        "decoder": _net_layout(ckpt.decoder.net),
        "config": ckpt.config,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    head = struct.pack("<4sIIIII", CHECKPOINT_MAGIC, ckpt.version, m.d_h, m.d_a, ckpt.n_keypoints,
                       len(grid.resolutions))
    head += b"".join(struct.pack("<II", r, t) for r, t in zip(grid.resolutions, grid.table_sizes))
    head += struct.pack("<II", grid.feature_dim, len(blob)) + blob
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for _, p in ckpt.parameters())
    body = head + payload
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, expect_d_a: int | None = None, expect_d_h: int | None = None,
                    expect_keypoints: int | None = None) -> Checkpoint:
    data = _read_bytes(path)
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 28:
        raise TruncatedPayloadError(f"{path}: truncated header")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError(f"{path}: checksum failure")
    _, version, d_h, d_a, n_kp, n_levels = struct.unpack_from("<4sIIIII", data)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    for name, found, want in (("d_a", d_a, expect_d_a), ("d_h", d_h, expect_d_h), ("L", n_kp, expect_keypoints)):
        if want is not None and found != want:
            raise DimensionMismatchError(name, found, want)
    off = 24
    levels = [struct.unpack_from("<II", data, off + 8 * k) for k in range(n_levels)]
    off += 8 * n_levels
    feature_dim, n_json = struct.unpack_from("<II", data, off)
    off += 8
    meta = json.loads(data[off : off + n_json].decode())
    off += n_json
    res = tuple(r for r, _ in levels)
    sizes = tuple(t for _, t in levels)
    grid = TriPlaneGrid(res, feature_dim, sizes, np.zeros((3 * sum(sizes), feature_dim)),
                        (tuple(meta["bbox"][0]), tuple(meta["bbox"][1])))
    if grid.d_h != d_h:
        raise FormatError(f"{path}: header d_h {d_h} disagrees with level layout")
    model = HeadModel(
        grid,
        GateNets(_empty_net(meta["mlp_a"]), _empty_net(meta["mlp_b"])),
        RadianceField(_empty_net(meta["trunk"]), _empty_net(meta["density"]),
                      _empty_net(meta["color"]), grid.out_dim, d_a),
        np.zeros(d_a),
        np.zeros(d_a),
    )
    ckpt = Checkpoint(model, ResidualDecoder(_empty_net(meta["decoder"])), meta["config"], version, n_kp)
    params = ckpt.parameters()
    need = sum(p.size for _, p in params) * 8
    if len(data) - 4 - off != need:
        raise TruncatedPayloadError(f"{path}: payload holds {len(data) - 4 - off} bytes, expected {need}")
    for _, p in params:
        n = p.size
        p[...] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(p.shape)
        off += 8 * n
    return ckpt
