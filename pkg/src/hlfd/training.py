"""Teacher pretraining, distillation runs, evaluation and multi-seed experiments."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SegSample, dihedral
from .losses import (DistillConfig, TeacherTargets, attention_distance, attention_map,
                     hlfd_total, teacher_targets)
from .metrics import EvalResult, aggregate, binarize, dsc, focal_dice_loss, rvd
from .nets import (NetConfig, SegNet, StudentNet, TeacherNet, build_student, build_teacher,
                   student_config)
from .optim import Adam, cosine_lr

logger = logging.getLogger(__name__)

MODES = ("teacher", "hlfd", "no_kd", "late_only_ablation")
STUDENT_MODES = ("hlfd", "no_kd", "late_only_ablation")
SENSITIVITY_GRID = ((0.9, 0.1), (1.8, 0.1), (0.9, 0.2))
DISTILL_TERMS = ("l_ufd", "l_ifd", "l_upd", "l_ipd", "l_f", "l_p")


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, step: int, value: float):
        self.epoch, self.step, self.value = epoch, step, value
        super().__init__(f"loss became {value} at epoch {epoch}, step {step}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    seeds: tuple[int, ...] = (0, 1, 2)
    mode: str = "hlfd"
    distill: DistillConfig = field(default_factory=DistillConfig)
    deep_supervision: float = 0.3
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    def digest(self) -> str:
        return config_hash(self)


def config_hash(*objs) -> str:
    payload = json.dumps([asdict(o) for o in objs], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunRecord:
    mode: str
    seed: int
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    eval: EvalResult | None = None
    seconds: float = 0.0
    lr_first: float = float("nan")
    lr_last: float = float("nan")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class Batcher:
    """Seeded epoch shuffles plus one dihedral transform index per drawn sample."""

    def __init__(self, samples: Sequence[SegSample], batch_size: int, seed: int, augment: bool = True):
        self.samples = list(samples)
        self.batch_size = batch_size
        self.augment = augment
        self.rng = np.random.default_rng([seed, 7919])

    def steps_per_epoch(self) -> int:
        return -(-len(self.samples) // self.batch_size)

    def epoch(self):
        order = self.rng.permutation(len(self.samples))
        ks = self.rng.integers(0, 8, size=len(order)) if self.augment else np.zeros(len(order), dtype=np.int64)
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            k = ks[start:start + self.batch_size]
            images = np.stack([dihedral(self.samples[i].image, int(t)) for i, t in zip(idx, k)])
            masks = np.stack([dihedral(self.samples[i].mask, int(t)) for i, t in zip(idx, k)])
            yield idx, k, images, masks


def _downsample_mask(masks: np.ndarray, h: int, w: int) -> np.ndarray:
    fh, fw = masks.shape[1] // h, masks.shape[2] // w
    frac = masks.reshape(masks.shape[0], h, fh, w, fw).mean(axis=(2, 4))
    return (frac >= 0.5).astype(np.int64)


def _schedule(cfg: TrainConfig, steps_per_epoch: int):
    total = cfg.epochs * steps_per_epoch
    last = max(total - 1, 1)
    return lambda step: cosine_lr(min(step, last), last, cfg.lr_max, cfg.lr_min)


def _finish_epoch(sums: dict, count: int, epoch: int, extra: dict) -> dict:
    row = {"epoch": epoch}
    row.update({k: v / count for k, v in sums.items()})
    row.update(extra)
    return row


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(epoch, step, value)


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

def teacher_loss(net: TeacherNet, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig) -> tuple[Tensor, float]:
    """Focal-Dice on the final head plus down-weighted deep supervision on stage heads."""
    logits = net.stage_logits(Tensor(images))
    final = focal_dice_loss(logits[-1], masks, cfg.focal_gamma, cfg.dice_smooth)
    total = final
    for stage in logits[:-1]:
        small = _downsample_mask(masks, *stage.shape[2:])
        total = total + cfg.deep_supervision * focal_dice_loss(stage, small, cfg.focal_gamma, cfg.dice_smooth)
    return total, final.item()


def train_teacher(cfg: TrainConfig, train_set: Sequence[SegSample], net_cfg: NetConfig | None = None,
                  seed: int = 0) -> tuple[TeacherNet, RunRecord]:
    if not train_set:
        raise ValueError("teacher training needs a nonempty train set")
    net_cfg = replace(net_cfg or NetConfig(), seed=seed)
    net = build_teacher(net_cfg)
    cfg = replace(cfg, mode="teacher")
    record = RunRecord("teacher", seed, config_hash(cfg, net_cfg))
    opt = Adam(net.parameters(), cfg.beta1, cfg.beta2)
    batcher = Batcher(train_set, cfg.batch_size, seed, cfg.augment)
    lr_at = _schedule(cfg, batcher.steps_per_epoch())
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        sums = {"l_seg": 0.0, "l_h": 0.0}
        count = 0
        for _, _, images, masks in batcher.epoch():
            total, final = teacher_loss(net, images, masks, cfg)
            _check_finite(total.item(), epoch, step)
            opt.zero_grad()
            ad.backward(total)
            lr = lr_at(step)
            if step == 0:
                record.lr_first = lr
            record.lr_last = lr
            opt.step(lr)
            sums["l_seg"] += final
            sums["l_h"] += total.item()
            count += 1
            step += 1
        record.epochs.append(_finish_epoch(sums, count, epoch, {"lr": lr}))
        logger.info("teacher epoch %d: loss %.4f", epoch, record.epochs[-1]["l_h"])
    record.seconds = time.perf_counter() - t0
    return net, record


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

class TeacherCache:
    """Frozen-teacher targets for every (sample, dihedral transform) pair.

    The teacher never changes during distillation, so its reduced outputs
    are computed once and indexed per batch.
    """

    def __init__(self, teacher: TeacherNet, samples: Sequence[SegSample], dcfg: DistillConfig,
                 transforms: Sequence[int] = tuple(range(8)), batch_size: int = 16):
        self.dcfg = dcfg
        self.transforms = tuple(transforms)
        self.n = len(samples)
        per_k = []
        with ad.no_grad():
            for k in self.transforms:
                chunks = []
                for start in range(0, self.n, batch_size):
                    imgs = np.stack([dihedral(s.image, k) for s in samples[start:start + batch_size]])
                    feat, pred, _ = teacher.forward(Tensor(imgs))
                    tgt = teacher_targets(feat, pred, dcfg)
                    late = attention_map(Tensor(feat.z_late.data), dcfg.attention_power, dcfg.eps)
                    chunks.append([t.data for t in tgt] + [late.data])
                per_k.append([np.concatenate(parts) for parts in zip(*chunks)])
        # arrays indexed [transform, sample, ...]
        self.arrays = [np.stack(parts) for parts in zip(*per_k)]

    def compatible(self, dcfg: DistillConfig) -> bool:
        return (dcfg.attention_power, dcfg.eps) == (self.dcfg.attention_power, self.dcfg.eps)

    def targets(self, idx: np.ndarray, ks: np.ndarray) -> TeacherTargets:
        slot = np.array([self.transforms.index(int(k)) for k in ks])
        return TeacherTargets(*(Tensor(a[slot, idx]) for a in self.arrays[:4]))

    def late_attention(self, idx: np.ndarray, ks: np.ndarray) -> Tensor:
        slot = np.array([self.transforms.index(int(k)) for k in ks])
        return Tensor(self.arrays[4][slot, idx])


def distill_student(cfg: TrainConfig, teacher: TeacherNet | None, train_set: Sequence[SegSample],
                    seed: int = 0, net_cfg: NetConfig | None = None,
                    cache: TeacherCache | None = None) -> tuple[StudentNet, RunRecord]:
    """Train a student in ``cfg.mode``; the teacher is only ever read."""
    mode = cfg.mode
    if mode not in STUDENT_MODES:
        raise ValueError(f"distill_student mode must be one of {STUDENT_MODES}, got {mode!r}")
    if not train_set:
        raise ValueError("distillation needs a nonempty train set")
    needs_teacher = mode != "no_kd"
    if needs_teacher and teacher is None:
        raise ValueError(f"mode {mode!r} needs a teacher")
    if teacher is not None and not isinstance(teacher, TeacherNet):
        raise ValueError("the teacher must be a TeacherNet")
    if needs_teacher:
        if cache is None:
            cache = TeacherCache(teacher, train_set, cfg.distill,
                                 transforms=range(8) if cfg.augment else (0,))
        elif cache.n != len(train_set) or not cache.compatible(cfg.distill):
            cache = TeacherCache(teacher, train_set, cfg.distill, cache.transforms)

    net_cfg = replace(net_cfg or student_config(), seed=seed)
    if teacher is not None and tuple(teacher.cfg.input_size) != tuple(net_cfg.input_size):
        raise ValueError("teacher and student disagree on input size")
    net = build_student(net_cfg)
    record = RunRecord(mode, seed, config_hash(cfg, net_cfg))
    opt = Adam(net.parameters(), cfg.beta1, cfg.beta2)
    batcher = Batcher(train_set, cfg.batch_size, seed, cfg.augment)
    lr_at = _schedule(cfg, batcher.steps_per_epoch())
    dcfg = cfg.distill
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        count = 0
        for idx, ks, images, masks in batcher.epoch():
            x = Tensor(images)
            if mode == "no_kd":
                logits = net.predict_logits(x)
                l_seg = focal_dice_loss(logits, masks, cfg.focal_gamma, cfg.dice_smooth)
                total = l_seg
                row = {"l_seg": l_seg.item(), "l_h": l_seg.item()}
            elif mode == "hlfd":
                feat, pred, logits = net.forward(x)
                l_seg = focal_dice_loss(logits, masks, cfg.focal_gamma, cfg.dice_smooth)
                parts = hlfd_total(l_seg, (feat, pred), cache.targets(idx, ks), dcfg)
                total = parts.total
                row = parts.as_row()
            else:
                feat = net.encode(x)
                H, W = net.cfg.input_size
                logits = ad.bilinear_resize(net.late_head(feat.z_late), H, W)
                l_seg = focal_dice_loss(logits, masks, cfg.focal_gamma, cfg.dice_smooth)
                l_late = attention_distance(feat.z_late, cache.late_attention(idx, ks), dcfg)
                total = l_seg + dcfg.beta * l_late
                row = {"l_seg": l_seg.item(), "l_late": l_late.item(), "l_h": total.item()}
            _check_finite(total.item(), epoch, step)
            opt.zero_grad()
            ad.backward(total)
            lr = lr_at(step)
            if step == 0:
                record.lr_first = lr
            record.lr_last = lr
            opt.step(lr)
            for key, val in row.items():
                sums[key] = sums.get(key, 0.0) + val
            count += 1
            step += 1
        record.epochs.append(_finish_epoch(sums, count, epoch, {"lr": lr}))
        logger.info("%s seed %d epoch %d: L_H %.4f", mode, seed, epoch, record.epochs[-1]["l_h"])
    record.seconds = time.perf_counter() - t0
    return net, record


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_masks(net: SegNet, images: np.ndarray, batch_size: int = 32, workers: int = 1) -> np.ndarray:
    """Binary masks for a stack of images.

    Batches are fixed-size regardless of ``workers``, so threading changes
    only the wall time, never the result.
    """
    starts = range(0, len(images), batch_size)

    def one(start: int) -> np.ndarray:
        x = Tensor(images[start:start + batch_size])
        logits = net.predict_logits(x) if isinstance(net, StudentNet) else net.forward(x)[2]
        return binarize(ad.softmax_channels(logits).data)

    with ad.no_grad():
        if workers > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                out = list(pool.map(one, starts))
        else:
            out = [one(start) for start in starts]
    return np.concatenate(out)


def evaluate(net: SegNet, test_set: Sequence[SegSample], batch_size: int = 32, workers: int = 1) -> EvalResult:
    if not test_set:
        raise ValueError("evaluation needs a nonempty test set")
    preds = predict_masks(net, np.stack([s.image for s in test_set]), batch_size, workers)
    rows = []
    for sample, pred in zip(test_set, preds):
        gt = sample.mask
        r = rvd(pred, gt) if gt.any() else None
        rows.append((sample.id, dsc(pred, gt), r))
    return aggregate(rows)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentRow:
    mode: str
    seed: int
    beta: float
    lam: float
    dsc: float
    rvd: float
    record: RunRecord | None = field(default=None, repr=False)
    student: StudentNet | None = field(default=None, repr=False)


@dataclass
class ExperimentReport:
    rows: list[ExperimentRow] = field(default_factory=list)
    teacher_eval: EvalResult | None = None
    teacher_record: RunRecord | None = None
    sensitivity: list[ExperimentRow] = field(default_factory=list)

    def summary(self, rows: list[ExperimentRow] | None = None) -> dict[str, dict[str, float]]:
        rows = self.rows if rows is None else rows
        out: dict[str, dict[str, float]] = {}
        for mode in dict.fromkeys(r.mode for r in rows):
            d = np.array([r.dsc for r in rows if r.mode == mode])
            v = np.array([r.rvd for r in rows if r.mode == mode])
            out[mode] = {"dsc_mean": float(d.mean()), "dsc_std": float(d.std()),
                         "rvd_mean": float(v.mean()), "rvd_std": float(v.std()), "n": len(d)}
        return out

    def mean_dsc(self, mode: str) -> float:
        return self.summary()[mode]["dsc_mean"]


def run_experiment(cfg: TrainConfig, train_set: Sequence[SegSample], test_set: Sequence[SegSample],
                   modes: Sequence[str] = STUDENT_MODES, teacher: TeacherNet | None = None,
                   teacher_cfg: TrainConfig | None = None, sensitivity: bool = False,
                   teacher_seed: int = 0, teacher_net: NetConfig | None = None,
                   student_net: NetConfig | None = None, workers: int = 1) -> ExperimentReport:
    """Every requested mode for every seed against one frozen teacher.

    The teacher is trained once (``teacher_cfg`` or ``cfg``, ``teacher_seed``,
    ``teacher_net``) unless one is passed in, and shared by all seeds.
    """
    if not cfg.seeds:
        raise ValueError("run_experiment needs at least one seed")
    report = ExperimentReport()
    needs_teacher = any(m != "no_kd" for m in modes) or sensitivity
    if teacher is None and needs_teacher:
        teacher, report.teacher_record = train_teacher(teacher_cfg or cfg, train_set, teacher_net,
                                                       seed=teacher_seed)
    if teacher is not None:
        report.teacher_eval = evaluate(teacher, test_set, workers=workers)
    cache = TeacherCache(teacher, train_set, cfg.distill,
                         transforms=range(8) if cfg.augment else (0,)) if needs_teacher else None

    done: dict[tuple, ExperimentRow] = {}

    def run(mode: str, seed: int, distill: DistillConfig) -> ExperimentRow:
        key = (mode, seed, distill)
        if key not in done:
            run_cfg = replace(cfg, mode=mode, distill=distill)
            student, record = distill_student(run_cfg, teacher if mode != "no_kd" else None,
                                              train_set, seed=seed, net_cfg=student_net,
                                              cache=cache if mode != "no_kd" else None)
            record.eval = evaluate(student, test_set, workers=workers)
            done[key] = ExperimentRow(mode, seed, distill.beta, distill.lam,
                                      record.eval.dsc, record.eval.rvd, record, student)
        return done[key]

    for seed in cfg.seeds:
        for mode in modes:
            report.rows.append(run(mode, seed, cfg.distill))
    if sensitivity:
        for beta, lam in SENSITIVITY_GRID:
            for seed in cfg.seeds:
                report.sensitivity.append(run("hlfd", seed, replace(cfg.distill, beta=beta, lam=lam)))
    return report
