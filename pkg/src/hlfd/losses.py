"""Layer-selective feedback distillation losses.

Feature level: the student's early tap is matched to the teacher's unified
middle taps, and every student middle tap to the teacher's late tap, by the
mean squared difference of L2-normalized attention maps. Pixel level: the
student's interpolated predictive maps are matched to the teacher decoder's
maps by a per-pixel KL divergence, KL(student || teacher).

Teacher-side arguments are treated as constants: they are detached before
use, so gradients only ever reach the student.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class DistillConfig:
    beta: float = 0.9
    lam: float = 0.1
    attention_power: float = 2.0
    eps: float = 1e-8
    kl_floor: float = 1e-12
    normalize_ifd: bool = False

    def __post_init__(self):
        for name in ("beta", "lam"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {val}")


@dataclass
class LossBreakdown:
    l_seg: float
    l_ufd: float = 0.0
    l_ifd: float = 0.0
    l_upd: float = 0.0
    l_ipd: float = 0.0
    l_f: float = 0.0
    l_p: float = 0.0
    l_h: float = 0.0
    total: Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("l_seg", "l_ufd", "l_ifd", "l_upd", "l_ipd", "l_f", "l_p", "l_h")}


def _const(t: Tensor) -> Tensor:
    return Tensor(ad.as_tensor(t).data)


# ---------------------------------------------------------------------------
# feature level
# ---------------------------------------------------------------------------

def attention_map(z: Tensor, p: float = 2.0, eps: float = 1e-8) -> Tensor:
    """Sum over channels of |z|^p, L2-normalized per batch item; shape N x 1 x H x W."""
    z = ad.as_tensor(z)
    raw = ad.tsum(ad.power(ad.absolute(z), p), axis=1, keepdims=True)
    norm = ad.sqrt(ad.tsum(raw * raw, axis=(1, 2, 3), keepdims=True))
    return raw / (norm + eps)


def raw_attention(z: Tensor, p: float = 2.0) -> np.ndarray:
    """Unnormalized attention, for inspection."""
    return np.sum(np.abs(ad.as_tensor(z).data) ** p, axis=1, keepdims=True)


def unify_mid_features(z_mid: Sequence[Tensor]) -> Tensor:
    """Resize every middle tap to the smallest grid among them and stack channels."""
    if not z_mid:
        raise ShapeError("unify_mid_features needs at least one middle tap")
    n = z_mid[0].shape[0]
    if any(z.shape[0] != n for z in z_mid):
        raise ShapeError("middle taps disagree in batch size")
    h = min(z.shape[2] for z in z_mid)
    w = min(z.shape[3] for z in z_mid)
    return ad.concat_channels([ad.bilinear_resize(z, h, w) for z in z_mid])


def attention_distance(z_s: Tensor, a_t: Tensor, cfg: DistillConfig) -> Tensor:
    """Resize the student tap to the target grid, then mean squared attention gap."""
    z_s = ad.as_tensor(z_s)
    if z_s.shape[0] != a_t.shape[0]:
        raise ShapeError(f"batch mismatch: student {z_s.shape[0]} vs teacher {a_t.shape[0]}")
    h, w = a_t.shape[2:]
    a_s = attention_map(ad.bilinear_resize(z_s, h, w), cfg.attention_power, cfg.eps)
    diff = a_s - a_t
    return ad.mean(diff * diff)


def ufd_loss(z_s_early: Tensor, z_t_mid: Sequence[Tensor], cfg: DistillConfig = DistillConfig()) -> Tensor:
    """Teacher's unified middle taps -> student's early tap."""
    unified = _const(unify_mid_features([_const(z) for z in z_t_mid]))
    a_t = _const(attention_map(unified, cfg.attention_power, cfg.eps))
    return attention_distance(z_s_early, a_t, cfg)


def _ifd_from_attention(z_s_mid: Sequence[Tensor], a_t: Tensor, cfg: DistillConfig) -> Tensor:
    if not z_s_mid:
        raise ShapeError("ifd_loss needs at least one student middle tap")
    total = None
    for z in z_s_mid:
        term = attention_distance(z, a_t, cfg)
        total = term if total is None else total + term
    return total / len(z_s_mid) if cfg.normalize_ifd else total


def ifd_loss(z_s_mid: Sequence[Tensor], z_t_late: Tensor, cfg: DistillConfig = DistillConfig()) -> Tensor:
    """Teacher's late tap -> each student middle tap, summed over middle taps."""
    a_t = _const(attention_map(_const(z_t_late), cfg.attention_power, cfg.eps))
    return _ifd_from_attention(z_s_mid, a_t, cfg)


# ---------------------------------------------------------------------------
# pixel level
# ---------------------------------------------------------------------------

def unify_mid_predictions(p_mid: Sequence[Tensor]) -> Tensor:
    """Average the middle predictive maps on the smallest grid, renormalized per pixel."""
    if not p_mid:
        raise ShapeError("unify_mid_predictions needs at least one map")
    k = p_mid[0].shape[1]
    if any(p.shape[1] != k for p in p_mid):
        raise ShapeError("predictive maps disagree in class count")
    h = min(p.shape[2] for p in p_mid)
    w = min(p.shape[3] for p in p_mid)
    resized = [ad.bilinear_resize(p, h, w) for p in p_mid]
    avg = resized[0]
    for r in resized[1:]:
        avg = avg + r
    if len(resized) > 1:
        avg = avg / float(len(resized))
    return avg / ad.tsum(avg, axis=1, keepdims=True)


def pixel_kl(p_s: Tensor, p_t: Tensor, cfg: DistillConfig) -> Tensor:
    """Pixel-mean of KL(student || teacher) after resizing the student to the teacher grid."""
    p_s = ad.as_tensor(p_s)
    if p_s.shape[1] != p_t.shape[1]:
        raise ShapeError(f"class-count mismatch: student {p_s.shape[1]} vs teacher {p_t.shape[1]}")
    if p_s.shape[0] != p_t.shape[0]:
        raise ShapeError(f"batch mismatch: student {p_s.shape[0]} vs teacher {p_t.shape[0]}")
    h, w = p_t.shape[2:]
    s = ad.bilinear_resize(p_s, h, w)
    log_t = np.log(p_t.data + cfg.kl_floor)
    kl = ad.tsum(s * (ad.log(s + cfg.kl_floor) - log_t), axis=1)
    return ad.mean(kl)


def upd_loss(p_s_early: Tensor, p_t_mid: Sequence[Tensor], cfg: DistillConfig = DistillConfig()) -> Tensor:
    """Teacher's unified middle predictions -> student's early predictive map."""
    target = _const(unify_mid_predictions([_const(p) for p in p_t_mid]))
    return pixel_kl(p_s_early, target, cfg)


def _ipd_from_target(p_s_mid: Sequence[Tensor], p_t: Tensor, cfg: DistillConfig) -> Tensor:
    if not p_s_mid:
        raise ShapeError("ipd_loss needs at least one student middle map")
    total = None
    for p in p_s_mid:
        term = pixel_kl(p, p_t, cfg)
        total = term if total is None else total + term
    return total / float(len(p_s_mid))


def ipd_loss(p_s_mid: Sequence[Tensor], p_t_late: Tensor, cfg: DistillConfig = DistillConfig()) -> Tensor:
    """Teacher's terminal predictive map -> each student middle map, averaged."""
    return _ipd_from_target(p_s_mid, _const(p_t_late), cfg)


# ---------------------------------------------------------------------------
# combiner
# ---------------------------------------------------------------------------

class TeacherTargets(NamedTuple):
    """Everything the four losses need from the frozen teacher, already reduced.

    ``a_mid``/``a_late`` are normalized attention maps of the unified middle
    taps and the late tap; ``p_mid`` is the unified middle prediction and
    ``p_late`` the terminal prediction.
    """

    a_mid: Tensor
    a_late: Tensor
    p_mid: Tensor
    p_late: Tensor

    def take(self, index) -> "TeacherTargets":
        return TeacherTargets(*(Tensor(t.data[index]) for t in self))


def teacher_targets(feat_t, pred_t, cfg: DistillConfig = DistillConfig()) -> TeacherTargets:
    with ad.no_grad():
        unified = unify_mid_features([_const(z) for z in feat_t.z_mid])
        a_mid = attention_map(unified, cfg.attention_power, cfg.eps)
        a_late = attention_map(_const(feat_t.z_late), cfg.attention_power, cfg.eps)
        p_mid = unify_mid_predictions([_const(p) for p in pred_t.p_mid])
    return TeacherTargets(_const(a_mid), _const(a_late), _const(p_mid), _const(pred_t.p_late))


def hlfd_total(l_seg: Tensor, taps_s, taps_t, cfg: DistillConfig = DistillConfig()) -> LossBreakdown:
    """L_H = L_seg + beta * (UFD + IFD) + lambda * (UPD + IPD).

    ``taps_s`` is ``(FeatureTaps, PredictiveTaps)`` of the student and
    ``taps_t`` either the teacher's pair or precomputed :class:`TeacherTargets`.
    The scalar to differentiate is in ``.total``.
    """
    feat_s, pred_s = taps_s
    targets = taps_t if isinstance(taps_t, TeacherTargets) else teacher_targets(*taps_t, cfg)
    l_ufd = attention_distance(feat_s.z_early, targets.a_mid, cfg)
    l_ifd = _ifd_from_attention(feat_s.z_mid, targets.a_late, cfg)
    l_upd = pixel_kl(pred_s.p_early, targets.p_mid, cfg)
    l_ipd = _ipd_from_target(pred_s.p_mid, targets.p_late, cfg)
    l_f = l_ufd + l_ifd
    l_p = l_upd + l_ipd
    l_seg = ad.as_tensor(l_seg)
    total = l_seg + cfg.beta * l_f + cfg.lam * l_p
    return LossBreakdown(
        l_seg=l_seg.item(), l_ufd=l_ufd.item(), l_ifd=l_ifd.item(), l_upd=l_upd.item(),
        l_ipd=l_ipd.item(), l_f=l_f.item(), l_p=l_p.item(), l_h=total.item(), total=total,
    )
