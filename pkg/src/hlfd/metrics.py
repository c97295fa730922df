"""Supervised objective, overlap metrics, Grad-CAM and netpbm image output."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

logger = logging.getLogger(__name__)


class EmptyGroundTruth(ValueError):
    """RVD is undefined for an empty reference mask."""


def _onehot(mask: np.ndarray, k: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{mask.min()}, {mask.max()}]")
    out = np.zeros((mask.shape[0], k) + mask.shape[1:], dtype=np.float64)
    np.put_along_axis(out, mask[:, None].astype(np.int64), 1.0, axis=1)
    return out


def focal_dice_loss(logits: Tensor, mask, gamma: float = 2.0, smooth: float = 1.0) -> Tensor:
    """Focal cross-entropy plus soft Dice on the foreground channel, equally weighted.

    ``logits`` is N x K x H x W, ``mask`` N x H x W integer labels. The Dice
    sums run over the whole batch.
    """
    logits = ad.as_tensor(logits)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(np.int64)
    if logits.ndim != 4 or mask.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"logits {logits.shape} and mask {mask.shape} disagree")
    k = logits.shape[1]
    onehot = _onehot(mask, k)

    logp_true = ad.tsum(ad.log_softmax_channels(logits) * onehot, axis=1)
    p_true = ad.exp(logp_true)
    focal = ad.mean(-ad.power(1.0 - p_true, gamma) * logp_true)

    p_fg = ad.softmax_channels(logits)[:, 1]
    g_fg = onehot[:, 1]
    inter = ad.tsum(p_fg * g_fg)
    dice = 1.0 - (2.0 * inter + smooth) / (ad.tsum(p_fg) + float(g_fg.sum()) + smooth)
    return focal + dice


def dsc(pred_mask, gt_mask) -> float:
    """Dice coefficient of two binary masks; 1.0 when both are empty."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def rvd(pred_mask, gt_mask) -> float:
    """Signed relative volume difference (|P| - |G|) / |G|."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    g_count = int(g.sum())
    if g_count == 0:
        raise EmptyGroundTruth("ground-truth mask is empty")
    return (int(p.sum()) - g_count) / g_count


def binarize(prob_map) -> np.ndarray:
    """Foreground where class 1 strictly wins the argmax (ties go to background)."""
    arr = np.asarray(prob_map.data if isinstance(prob_map, Tensor) else prob_map)
    # np.argmax returns the first maximum, which is the background class on ties
    return (np.argmax(arr, axis=-3) == 1).astype(np.uint8)


@dataclass
class EvalResult:
    dsc: float
    rvd: float
    per_sample: list[tuple[str, float, float]] = field(default_factory=list)
    rvd_excluded: int = 0


def aggregate(per_sample: list[tuple[str, float, float | None]]) -> EvalResult:
    """Mean DSC over all samples; mean RVD over samples with a defined RVD."""
    if not per_sample:
        raise ValueError("nothing to aggregate")
    dscs = np.array(sorted(d for _, d, _ in per_sample))
    rvds = np.array(sorted(r for _, _, r in per_sample if r is not None))
    excluded = len(per_sample) - len(rvds)
    if excluded:
        logger.info("RVD undefined for %d sample(s) with empty ground truth", excluded)
    rows = [(sid, d, float("nan") if r is None else r) for sid, d, r in per_sample]
    return EvalResult(float(np.mean(dscs)), float(np.mean(rvds)) if len(rvds) else float("nan"),
                      rows, excluded)


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

def gradcam(net, x, tap: str = "early", target_class: int = 1) -> np.ndarray:
    """Grad-CAM heatmap (H x W, values in [0, 1]) for a single image.

    The score is the mean ``target_class`` logit over all output pixels.
    """
    if tap not in ("early", "late"):
        raise ValueError(f"tap must be 'early' or 'late', got {tap!r}")
    x = ad.as_tensor(x)
    if x.ndim == 3:
        x = Tensor(x.data[None])
    if x.shape[0] != 1:
        raise ShapeError("gradcam works on one image at a time")
    params = net.parameters()
    saved = [p.grad for p in params]
    try:
        feats, _, logits = net.forward(x)
        act = feats.z_early if tap == "early" else feats.z_late
        score = ad.mean(logits[:, target_class])
        ad.backward(score)
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    finally:
        for p, g in zip(params, saved):
            p.grad = g
    weights = grad.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * act.data).sum(axis=1, keepdims=True), 0.0)
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        cam = np.zeros_like(cam)
    else:
        cam = (cam - lo) / (hi - lo)
    H, W = x.shape[2:]
    out = ad.bilinear_resize(Tensor(cam), H, W).data[0, 0]
    return np.clip(out, 0.0, 1.0)


def heatmap_contrast(heatmap: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Mean heatmap value inside and outside the mask."""
    m = np.asarray(mask).astype(bool)
    inside = float(heatmap[m].mean()) if m.any() else float("nan")
    outside = float(heatmap[~m].mean()) if (~m).any() else float("nan")
    return inside, outside


# ---------------------------------------------------------------------------
# netpbm output
# ---------------------------------------------------------------------------

def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM (P5) of a [0, 1] image."""
    data = _to_u8(image)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def write_ppm_overlay(path, image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> None:
    """Binary PPM (P6): grayscale image with the mask blended in green."""
    gray = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([gray, gray, gray], axis=-1)
    m = np.asarray(mask).astype(bool)
    green = np.array([0.0, 1.0, 0.0])
    rgb[m] = (1.0 - alpha) * rgb[m] + alpha * green
    data = _to_u8(rgb)
    h, w = m.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def write_ppm_heat(path, image: np.ndarray, heat: np.ndarray, mask=None, alpha: float = 0.6) -> None:
    """Binary PPM (P6): heatmap blended in red over the image, mask border in green."""
    gray = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    a = alpha * np.clip(np.asarray(heat, dtype=np.float64), 0.0, 1.0)[..., None]
    rgb = (1.0 - a) * np.stack([gray, gray, gray], axis=-1) + a * np.array([1.0, 0.0, 0.0])
    if mask is not None:
        m = np.asarray(mask).astype(bool)
        inner = m.copy()
        inner[1:, :] &= m[:-1, :]
        inner[:-1, :] &= m[1:, :]
        inner[:, 1:] &= m[:, :-1]
        inner[:, :-1] &= m[:, 1:]
        rgb[m & ~inner] = (0.0, 1.0, 0.0)
    data = _to_u8(rgb)
    h, w = gray.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a P5/P6 file written by this module (uint8 array)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    magic, dims, maxval, payload = parts
    w, h = map(int, dims.split())
    if int(maxval) != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported netpbm header in {path}")
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)
