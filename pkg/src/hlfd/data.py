"""Synthetic tumor-like segmentation data, HU windowing, augmentation and SEGV1 files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

SEGV1_MAGIC = b"SEGV1\0"


class SegvError(ValueError):
    """Base class for SEGV1 decoding failures."""

    kind = "segv"


class BadMagicError(SegvError):
    kind = "bad magic"


class TruncatedError(SegvError):
    kind = "truncated"

    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"truncated payload in sample {index}")


class LabelRangeError(SegvError):
    kind = "label range"


@dataclass
class SegSample:
    image: np.ndarray  # 1 x H x W float64 in [0, 1]
    mask: np.ndarray   # H x W uint8 labels in {0, 1}
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} disagree for {self.id}")
        if self.mask.size and self.mask.max() > 1:
            raise ValueError(f"mask labels must be 0/1 in {self.id}")

    def equals(self, other: "SegSample") -> bool:
        return (self.id == other.id and self.image.shape == other.image.shape
                and self.image.tobytes() == other.image.tobytes()
                and self.mask.tobytes() == other.mask.tobytes())


@dataclass(frozen=True)
class SynthConfig:
    count: int = 600
    size: tuple[int, int] = (64, 64)
    blobs_per_image: tuple[int, int] = (1, 3)
    blob_radius: tuple[float, float] = (3.0, 12.0)
    intensity_contrast: float = 0.3
    noise_sigma: float = 0.1
    background_texture_scale: float = 0.15
    seed: int = 0


def _background(rng: np.random.Generator, h: int, w: int, texture: float) -> np.ndarray:
    # smooth field in [0.3 - texture, 0.3 + texture]
    field = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 10.0, mode="wrap")
    field /= np.abs(field).max() + 1e-12
    return 0.3 + texture * field


def _blob_mask(rng: np.random.Generator, h: int, w: int, r_lo: float, r_hi: float) -> np.ndarray:
    a, b = rng.uniform(r_lo, r_hi, size=2)
    theta = rng.uniform(0.0, np.pi)
    cy = rng.uniform(a, h - 1 - a) if h - 1 > 2 * a else (h - 1) / 2
    cx = rng.uniform(a, w - 1 - a) if w - 1 > 2 * a else (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synth_generate(cfg: SynthConfig) -> list[SegSample]:
    """Seeded images with elliptical bright blobs on a smooth noisy background.

    Draws whose foreground fraction falls outside (0, 0.5) are redrawn.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.size
    samples = []
    for i in range(cfg.count):
        while True:
            bg = _background(rng, h, w, cfg.background_texture_scale)
            n_blobs = int(rng.integers(cfg.blobs_per_image[0], cfg.blobs_per_image[1] + 1))
            mask = np.zeros((h, w), dtype=bool)
            for _ in range(n_blobs):
                mask |= _blob_mask(rng, h, w, *cfg.blob_radius)
            noise = rng.standard_normal((h, w)) * cfg.noise_sigma
            frac = mask.mean()
            if 0.0 < frac < 0.5:
                break
        image = np.clip(bg + cfg.intensity_contrast * mask + noise, 0.0, 1.0)
        samples.append(SegSample(image[None], mask.astype(np.uint8), f"synth-{cfg.seed}-{i:05d}"))
    return samples


def window_hu(raw, lo: float, hi: float) -> np.ndarray:
    """Clamp-and-rescale Hounsfield units to [0, 1]."""
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got ({lo}, {hi})")
    return np.clip((np.asarray(raw, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


LIVER_WINDOW = (-40.0, 160.0)
KIDNEY_WINDOW = (-200.0, 300.0)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def dihedral(arr: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` in 0..7 of the square's symmetry group on the last two axes.

    ``k % 4`` quarter turns, preceded by a horizontal flip when ``k >= 4``.
    """
    if not 0 <= k < 8:
        raise ValueError(f"transform index must be in 0..7, got {k}")
    if k % 2 and arr.shape[-1] != arr.shape[-2]:
        raise ValueError(f"90/270 degree rotation needs a square image, got {arr.shape[-2:]}")
    out = arr[..., ::-1] if k >= 4 else arr
    return np.ascontiguousarray(np.rot90(out, k % 4, axes=(-2, -1)))


def augment(sample: SegSample, rng: np.random.Generator, k: int | None = None) -> SegSample:
    """Apply one uniformly drawn dihedral transform to image and mask alike."""
    if k is None:
        k = int(rng.integers(0, 8))
    return SegSample(dihedral(sample.image, k), dihedral(sample.mask, k), sample.id)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split(samples: list[SegSample], train_fraction: float, seed: int = 0):
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(round(len(samples) * train_fraction))
    if n_train == 0 or n_train == len(samples):
        raise ValueError(f"split of {len(samples)} samples at {train_fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(len(samples))
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


def stack(samples: list[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))


# ---------------------------------------------------------------------------
# SEGV1 files
# ---------------------------------------------------------------------------

def encode_segv(samples: list[SegSample]) -> bytes:
    parts = [SEGV1_MAGIC, struct.pack("<I", len(samples))]
    for s in samples:
        sid = s.id.encode("utf-8")
        h, w = s.mask.shape
        parts.append(struct.pack("<I", len(sid)) + sid + struct.pack("<II", h, w))
        parts.append(s.image.astype("<f8").tobytes())
        parts.append(s.mask.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_segv(buf: bytes) -> list[SegSample]:
    if buf[:len(SEGV1_MAGIC)] != SEGV1_MAGIC:
        raise BadMagicError("bad magic: not a SEGV1 file")
    pos = len(SEGV1_MAGIC)
    if len(buf) < pos + 4:
        raise TruncatedError(0, "truncated header")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    samples = []
    for i in range(count):
        try:
            (id_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + id_len + 8 > len(buf):
                raise TruncatedError(i)
            sid = buf[pos:pos + id_len].decode("utf-8")
            pos += id_len
            h, w = struct.unpack_from("<II", buf, pos)
            pos += 8
        except struct.error:
            raise TruncatedError(i) from None
        n = h * w
        if pos + 9 * n > len(buf):
            raise TruncatedError(i)
        image = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(1, h, w)
        pos += 8 * n
        mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(h, w).copy()
        pos += n
        if n and mask.max() > 1:
            raise LabelRangeError(f"label {int(mask.max())} > 1 in sample {i}")
        samples.append(SegSample(image, mask, sid))
    return samples


def save_segv(path, samples: list[SegSample]) -> None:
    Path(path).write_bytes(encode_segv(samples))


def load_segv(path) -> list[SegSample]:
    return decode_segv(Path(path).read_bytes())
