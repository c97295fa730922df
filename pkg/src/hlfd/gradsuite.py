"""Finite-difference check of every differentiable op and every loss.

All inputs are seeded and no larger than 2x4x8x8, so the whole suite runs in
a few seconds. ``run_suite`` is what ``hlfd gradcheck`` executes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .losses import ifd_loss, ipd_loss, ufd_loss, upd_loss
from .metrics import focal_dice_loss

TOLERANCE = 1e-4


def _rand(*shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def _prob(*shape, seed: int) -> Tensor:
    return Tensor(ad.softmax_channels(Tensor(_rand(*shape, seed=seed))).data)


def _mask(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.random((2, 8, 8)) < 0.3).astype(np.uint8)


def _cases() -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    weights = _rand(2, 3, 4, 4, seed=13)
    weights_log = _rand(2, 3, 4, 4, seed=15)
    z_t_mid = [Tensor(_rand(1, 4, 8, 8, seed=20)), Tensor(_rand(1, 3, 4, 4, seed=21))]
    z_t_late = Tensor(_rand(2, 4, 2, 2, seed=23))
    p_t_mid = [_prob(1, 2, 4, 4, seed=26), _prob(1, 2, 2, 2, seed=27)]
    p_t_late = _prob(2, 2, 8, 8, seed=29)
    mask = _mask(33)
    return {
        # tensor ops
        "add_sub_broadcast": (lambda a, b: ad.tsum((a + b - a * 0.5) ** 2), [_rand(2, 3, 4, seed=40), _rand(1, 3, 1, seed=41)]),
        "mul_div": (lambda a, b: ad.mean(a * b / (b * b + 1.0)), [_rand(4, 3, seed=42), _rand(1, 3, seed=43)]),
        "power_abs_sqrt": (lambda x: ad.tsum(ad.sqrt(ad.power(ad.absolute(x), 2.0) + 1.0)), [_rand(3, 4, seed=17)]),
        "exp_log": (lambda x: ad.mean(ad.log(ad.exp(x) + 1.0)), [_rand(4, 3, seed=18)]),
        "relu": (lambda x: ad.tsum(ad.relu(x) ** 2), [_rand(2, 4, 8, 8, seed=12)]),
        "sum_axis_reshape": (lambda x: ad.tsum(ad.reshape(ad.tsum(x, axis=(2, 3)), (8,)) ** 2),
                             [_rand(2, 4, 3, 3, seed=44)]),
        "getitem": (lambda x: ad.mean(x[:, 1] ** 3), [_rand(2, 3, 4, 4, seed=20)]),
        "conv2d": (lambda x, w, b: ad.tsum(ad.conv2d(x, w, b, 1, 1) ** 2),
                   [_rand(2, 2, 5, 5, seed=1), _rand(3, 2, 3, 3, seed=2), _rand(3, seed=3)]),
        "conv2d_stride2": (lambda x, w, b: ad.tsum(ad.conv2d(x, w, b, 2, 1) ** 2),
                           [_rand(1, 2, 6, 6, seed=4), _rand(2, 2, 3, 3, seed=5), _rand(2, seed=6)]),
        "conv2d_1x1": (lambda x, w, b: ad.tsum(ad.conv2d(x, w, b, 1, 0) ** 2),
                       [_rand(2, 4, 4, 4, seed=45), _rand(2, 4, 1, 1, seed=46), _rand(2, seed=47)]),
        "max_pool2": (lambda x: ad.tsum(ad.max_pool2(x) ** 2), [_rand(2, 4, 8, 8, seed=7)]),
        "bilinear_up": (lambda x: ad.tsum(ad.bilinear_resize(x, 7, 5) ** 2), [_rand(1, 2, 4, 3, seed=8)]),
        "bilinear_down": (lambda x: ad.tsum(ad.bilinear_resize(x, 3, 3) ** 2), [_rand(2, 1, 8, 8, seed=9)]),
        "concat": (lambda a, b: ad.tsum(ad.concat_channels([a, b]) * np.arange(5.0).reshape(1, 5, 1, 1)),
                   [_rand(1, 2, 3, 3, seed=10), _rand(1, 3, 3, 3, seed=11)]),
        "softmax": (lambda x: ad.tsum(ad.softmax_channels(x) * weights), [_rand(2, 3, 4, 4, seed=14)]),
        "log_softmax": (lambda x: ad.tsum(ad.log_softmax_channels(x) * weights_log), [_rand(2, 3, 4, 4, seed=16)]),
        # losses
        "loss_ufd": (lambda z: ufd_loss(z, z_t_mid), [_rand(1, 4, 8, 8, seed=22)]),
        "loss_ifd": (lambda a, b: ifd_loss([a, b], z_t_late), [_rand(2, 4, 8, 8, seed=24), _rand(2, 3, 4, 4, seed=25)]),
        "loss_upd": (lambda x: upd_loss(ad.softmax_channels(x), p_t_mid), [_rand(1, 2, 8, 8, seed=28)]),
        "loss_ipd": (lambda a, b: ipd_loss([ad.softmax_channels(a), ad.softmax_channels(b)], p_t_late),
                     [_rand(2, 2, 8, 8, seed=30), _rand(2, 2, 4, 4, seed=31)]),
        "loss_focal_dice": (lambda x: focal_dice_loss(x, mask), [_rand(2, 2, 8, 8, seed=32)]),
    }


CASE_NAMES = tuple(_cases())
LOSS_CASES = tuple(n for n in CASE_NAMES if n.startswith("loss_"))


@dataclass
class GradResult:
    name: str
    error: float
    seconds: float
    failure: str = ""

    @property
    def passed(self) -> bool:
        return not self.failure and self.error < TOLERANCE


def run_suite(names=None) -> list[GradResult]:
    cases = _cases()
    out = []
    for name in names or CASE_NAMES:
        f, inputs = cases[name]
        t0 = time.perf_counter()
        try:
            err = ad.gradcheck(f, inputs)
            failure = ""
        except NonFiniteError as exc:
            err, failure = float("inf"), f"non-finite value in op {exc.op}"
        out.append(GradResult(name, err, time.perf_counter() - t0, failure))
    return out
