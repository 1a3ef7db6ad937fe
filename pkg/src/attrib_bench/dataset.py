"""Deterministic synthetic 10-class shape dataset.

Each 64x64 RGB image shows one colored figure (a shape x color archetype)
at a randomized position, scale and rotation over a textured background.
Classes 0 (red disk) and 8 (red crescent) deliberately share their color so
that low-level features overlap between two classes.

Generation is a pure function of (seed, generator version, sample id): each
sample draws from its own PCG64 stream spawned from the dataset seed. Pixels
are quantized to f32 at generation time so that the f32 on-disk format
round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .imaging import bilinear_upsample

GENERATOR_VERSION = "1"
NUM_CLASSES = 10
SIDE = 64
CHANNELS = 3

_MAGIC = b"ADS1"
_FILE_VERSION = 1

CLASS_NAMES = [
    "red-disk",
    "green-square",
    "blue-triangle",
    "yellow-ring",
    "magenta-cross",
    "cyan-diamond",
    "orange-frame",
    "purple-xshape",
    "red-crescent",
    "white-doublebar",
]

_COLORS = np.array(
    [
        [0.90, 0.10, 0.10],  # red (shared by classes 0 and 8)
        [0.10, 0.85, 0.15],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.90, 0.15, 0.90],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.60, 0.20, 0.90],
        [0.90, 0.10, 0.10],  # red again
        [0.95, 0.95, 0.95],
    ]
)


@dataclass
class DatasetManifest:
    seed: int
    n_train: int
    n_eval: int
    side: int
    channels: int
    version: str


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (3, S, S) f64 in [0, 1]
    label: int
    sample_id: int


@dataclass
class Dataset:
    manifest: DatasetManifest
    pixels: np.ndarray  # (N, 3, S, S) f64
    labels: np.ndarray  # (N,) int

    def __len__(self):
        return self.pixels.shape[0]

    def image(self, sample_id: int) -> LabeledImage:
        return LabeledImage(self.pixels[sample_id], int(self.labels[sample_id]), sample_id)

    @property
    def train_ids(self) -> np.ndarray:
        return np.arange(self.manifest.n_train)

    @property
    def eval_ids(self) -> np.ndarray:
        n = self.manifest.n_train
        return np.arange(n, n + self.manifest.n_eval)


# ---------------------------------------------------------------------------
# shape signed-distance functions on unit coordinates
# ---------------------------------------------------------------------------


def _sdf_disk(ux, uy):
    return np.hypot(ux, uy) - 1.0


def _sdf_square(ux, uy):
    return np.maximum(np.abs(ux), np.abs(uy)) - 0.85


def _sdf_triangle(ux, uy):
    # equilateral triangle pointing up, inscribed in the unit circle
    c, s = -0.5, np.sqrt(3) / 2
    d1 = -uy - 0.5
    d2 = c * (-uy) + s * ux - 0.5
    d3 = c * (-uy) - s * ux - 0.5
    return np.maximum(np.maximum(d1, d2), d3)


def _sdf_ring(ux, uy):
    return np.abs(np.hypot(ux, uy) - 0.72) - 0.28


def _sdf_cross(ux, uy):
    bar1 = np.maximum(np.abs(ux) - 0.32, np.abs(uy) - 1.0)
    bar2 = np.maximum(np.abs(ux) - 1.0, np.abs(uy) - 0.32)
    return np.minimum(bar1, bar2)


def _sdf_diamond(ux, uy):
    return (np.abs(ux) + np.abs(uy)) / np.sqrt(2.0) - 0.72


def _sdf_frame(ux, uy):
    return np.abs(np.maximum(np.abs(ux), np.abs(uy)) - 0.72) - 0.22


def _sdf_xshape(ux, uy):
    r = np.sqrt(0.5)
    rx, ry = (ux + uy) * r, (uy - ux) * r
    return _sdf_cross(rx, ry)


def _sdf_crescent(ux, uy):
    outer = np.hypot(ux, uy) - 1.0
    inner = np.hypot(ux - 0.55, uy) - 0.75
    return np.maximum(outer, -inner)


def _sdf_doublebar(ux, uy):
    bar_l = np.maximum(np.abs(ux + 0.55) - 0.24, np.abs(uy) - 1.0)
    bar_r = np.maximum(np.abs(ux - 0.55) - 0.24, np.abs(uy) - 1.0)
    return np.minimum(bar_l, bar_r)


_SDFS = [
    _sdf_disk,
    _sdf_square,
    _sdf_triangle,
    _sdf_ring,
    _sdf_cross,
    _sdf_diamond,
    _sdf_frame,
    _sdf_xshape,
    _sdf_crescent,
    _sdf_doublebar,
]


def _render(label: int, rng: np.random.Generator) -> np.ndarray:
    s = SIDE
    # textured background: coarse random field upsampled bilinearly + pixel noise
    base = rng.uniform(0.25, 0.50, size=3)
    coarse = rng.uniform(-1.0, 1.0, size=(8, 8))
    field = bilinear_upsample(coarse, (s, s))
    noise = rng.uniform(-1.0, 1.0, size=(s, s))
    img = base[:, None, None] + 0.10 * field[None] + 0.05 * noise[None]

    # figure placement: kept inside the cell with a safety margin
    cx = rng.uniform(22.0, 42.0)
    cy = rng.uniform(22.0, 42.0)
    scale = rng.uniform(10.0, 16.0)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    shade = rng.uniform(0.85, 1.0)

    yy, xx = np.mgrid[0:s, 0:s]
    dx = (xx + 0.5 - cx) / scale
    dy = (yy + 0.5 - cy) / scale
    ct, st = np.cos(theta), np.sin(theta)
    ux = ct * dx + st * dy
    uy = -st * dx + ct * dy

    sdf_px = _SDFS[label](ux, uy) * scale
    alpha = np.clip(0.5 - sdf_px, 0.0, 1.0)  # ~1-px soft edge
    color = _COLORS[label] * shade
    img = img * (1.0 - alpha[None]) + color[:, None, None] * alpha[None]
    return np.clip(img, 0.0, 1.0)


def _sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(0, sample_id))
    return np.random.Generator(np.random.PCG64(ss))


def generate(seed: int, n_train: int, n_eval: int) -> Dataset:
    """Synthesize a class-balanced dataset; bit-identical for equal inputs."""
    for name, n in (("n_train", n_train), ("n_eval", n_eval)):
        if n < NUM_CLASSES:
            raise ConfigError(f"{name} must be >= {NUM_CLASSES}, got {n}")
        if n % NUM_CLASSES:
            raise ConfigError(f"{name} must be a multiple of {NUM_CLASSES} for exact balance")
    total = n_train + n_eval
    pixels = np.empty((total, CHANNELS, SIDE, SIDE))
    labels = np.empty(total, dtype=np.int64)
    for i in range(total):
        label = i % NUM_CLASSES
        img = _render(label, _sample_rng(seed, i))
        # quantize to the on-disk precision so save/load round-trips bit-exactly
        pixels[i] = img.astype(np.float32).astype(np.float64)
        labels[i] = label
    manifest = DatasetManifest(seed, n_train, n_eval, SIDE, CHANNELS, GENERATOR_VERSION)
    return Dataset(manifest, pixels, labels)


# ---------------------------------------------------------------------------
# on-disk format: magic ADS1, little-endian header, f32 pixel records
# ---------------------------------------------------------------------------


def save(ds: Dataset, path) -> None:
    m = ds.manifest
    ver = m.version.encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQIIII", _FILE_VERSION, m.seed, m.n_train, m.n_eval, m.side, m.channels))
        f.write(struct.pack("<H", len(ver)))
        f.write(ver)
        for i in range(len(ds)):
            f.write(struct.pack("<H", int(ds.labels[i])))
            f.write(ds.pixels[i].astype("<f4").tobytes())


def load(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    off = 4
    try:
        file_ver, seed, n_train, n_eval, side, channels = struct.unpack_from("<IQIIII", raw, off)
        off += struct.calcsize("<IQIIII")
        if file_ver != _FILE_VERSION:
            raise FormatError(f"{path}: unsupported dataset file version {file_ver}")
        (vlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        version = raw[off : off + vlen].decode()
        off += vlen
        total = n_train + n_eval
        rec = 2 + 4 * channels * side * side
        if len(raw) - off != total * rec:
            raise FormatError(
                f"{path}: truncated dataset file ({len(raw) - off} payload bytes, expected {total * rec})"
            )
        pixels = np.empty((total, channels, side, side))
        labels = np.empty(total, dtype=np.int64)
        for i in range(total):
            (labels[i],) = struct.unpack_from("<H", raw, off)
            off += 2
            flat = np.frombuffer(raw, dtype="<f4", count=channels * side * side, offset=off)
            pixels[i] = flat.reshape(channels, side, side).astype(np.float64)
            off += 4 * channels * side * side
    except struct.error as e:
        raise FormatError(f"{path}: truncated dataset file ({e})") from None
    manifest = DatasetManifest(seed, n_train, n_eval, side, channels, version)
    return Dataset(manifest, pixels, labels)
