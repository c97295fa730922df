"""Teacher encoder-decoder and compact student, both exposing distillation taps.

Encoder blocks are ``conv3x3 -> relu -> conv3x3 -> relu -> max_pool2``; the
pooled output of block 1 is the early tap, blocks 2..N+1 are the middle taps
and block N+2 is the late tap. The teacher decodes the late tap with N+1
upsample stages that concatenate the encoder taps as skips; the student has
no decoder and instead hangs a 1x1 class head on every tap.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

TEACHER_CHANNELS = (16, 32, 64, 128)
STUDENT_CHANNELS = (8, 16, 32, 64)


@dataclass(frozen=True)
class NetConfig:
    encoder_channels: tuple[int, ...] = TEACHER_CHANNELS
    num_mid_layers: int = 2
    num_classes: int = 2
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.num_mid_layers < 1:
            raise ValueError("num_mid_layers must be >= 1")
        if len(self.encoder_channels) != self.num_mid_layers + 2:
            raise ValueError(
                f"encoder_channels needs {self.num_mid_layers + 2} entries, got {len(self.encoder_channels)}")
        if any(c < 1 for c in self.encoder_channels) or self.num_classes < 2:
            raise ValueError("channel counts must be positive and num_classes >= 2")
        factor = 2 ** self.num_blocks
        h, w = self.input_size
        if h % factor or w % factor:
            raise ShapeError(f"input size {h}x{w} is not divisible by 2^{self.num_blocks}")

    @property
    def num_blocks(self) -> int:
        return self.num_mid_layers + 2


def teacher_config(**overrides) -> NetConfig:
    return replace(NetConfig(), **overrides)


def student_config(**overrides) -> NetConfig:
    overrides.setdefault("encoder_channels", STUDENT_CHANNELS)
    return replace(NetConfig(), **overrides)


class FeatureTaps(NamedTuple):
    z_early: Tensor
    z_mid: list[Tensor]
    z_late: Tensor


class PredictiveTaps(NamedTuple):
    p_early: Tensor
    p_mid: list[Tensor]
    p_late: Tensor


class Conv:
    """Conv layer with He fan-in initialization and zero bias."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = Tensor(rng.standard_normal((c_out, c_in, k, k)) * std, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class EncoderBlock:
    def __init__(self, rng, c_in: int, c_out: int):
        self.conv1 = Conv(rng, c_in, c_out, 3)
        self.conv2 = Conv(rng, c_out, c_out, 3)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.max_pool2(ad.relu(self.conv2(ad.relu(self.conv1(x)))))


class DecoderBlock:
    def __init__(self, rng, c_up: int, c_skip: int, c_out: int):
        self.conv1 = Conv(rng, c_up + c_skip, c_out, 3)
        self.conv2 = Conv(rng, c_out, c_out, 3)

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        h, w = skip.shape[2:]
        up = ad.bilinear_resize(x, h, w)
        y = ad.concat_channels([up, skip])
        return ad.relu(self.conv2(ad.relu(self.conv1(y))))


class SegNet:
    """Shared parameter bookkeeping and the encoder."""

    kind = "net"

    def __init__(self, cfg: NetConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        chans = (cfg.in_channels,) + tuple(cfg.encoder_channels)
        self.encoder = [EncoderBlock(rng, chans[i], chans[i + 1]) for i in range(cfg.num_blocks)]
        self._build_heads(rng)

    def _build_heads(self, rng) -> None:
        raise NotImplementedError

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def collect(prefix: str, obj) -> None:
            if isinstance(obj, Conv):
                out[f"{prefix}.weight"] = obj.weight
                out[f"{prefix}.bias"] = obj.bias
            elif isinstance(obj, list):
                for i, item in enumerate(obj):
                    collect(f"{prefix}.{i}", item)
            elif hasattr(obj, "__dict__"):
                for key, val in vars(obj).items():
                    if isinstance(val, (Conv, list, EncoderBlock, DecoderBlock)):
                        collect(f"{prefix}.{key}" if prefix else key, val)

        collect("", self)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _check_input(self, x: Tensor) -> None:
        expected = (self.cfg.in_channels,) + tuple(self.cfg.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"{self.kind} expects N x {expected[0]} x {expected[1]} x {expected[2]}, got {x.shape}")

    def encode(self, x: Tensor) -> FeatureTaps:
        feats = []
        h = x
        for block in self.encoder:
            h = block(h)
            feats.append(h)
        return FeatureTaps(feats[0], feats[1:-1], feats[-1])

    def forward(self, x: Tensor) -> tuple[FeatureTaps, PredictiveTaps, Tensor]:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        return self.forward(ad.as_tensor(x))[2]


class TeacherNet(SegNet):
    kind = "teacher"

    def _build_heads(self, rng) -> None:
        ch = list(self.cfg.encoder_channels)
        k = self.cfg.num_classes
        # stage s upsamples from ch[-1-s] channels and concatenates tap ch[-2-s]
        self.decoder = [DecoderBlock(rng, ch[-1 - s], ch[-2 - s], ch[-2 - s])
                        for s in range(self.cfg.num_mid_layers + 1)]
        self.bottleneck_head = Conv(rng, ch[-1], k, 1)
        self.stage_heads = [Conv(rng, ch[-2 - s], k, 1) for s in range(self.cfg.num_mid_layers + 1)]

    def _decode(self, x: Tensor) -> tuple[FeatureTaps, list[Tensor]]:
        self._check_input(x)
        taps = self.encode(x)
        skips = [taps.z_early] + list(taps.z_mid)
        h = taps.z_late
        logits = [self.bottleneck_head(h)]
        for block, head, skip in zip(self.decoder, self.stage_heads, reversed(skips)):
            h = block(h, skip)
            logits.append(head(h))
        H, W = self.cfg.input_size
        logits[-1] = ad.bilinear_resize(logits[-1], H, W)
        return taps, logits

    def forward(self, x: Tensor):
        taps, logits = self._decode(x)
        probs = [ad.softmax_channels(s) for s in logits]
        return taps, PredictiveTaps(probs[0], probs[1:-1], probs[-1]), logits[-1]

    def stage_logits(self, x: Tensor) -> list[Tensor]:
        """Pre-softmax logits of every head, coarsest first; the last is full size."""
        return self._decode(x)[1]


class StudentNet(SegNet):
    kind = "student"

    def _build_heads(self, rng) -> None:
        ch = list(self.cfg.encoder_channels)
        k = self.cfg.num_classes
        self.early_head = Conv(rng, ch[0], k, 1)
        self.mid_heads = [Conv(rng, c, k, 1) for c in ch[1:-1]]
        self.late_head = Conv(rng, ch[-1], k, 1)

    def forward(self, x: Tensor):
        self._check_input(x)
        taps = self.encode(x)
        H, W = self.cfg.input_size

        def interp(head, z):
            return ad.bilinear_resize(head(z), H, W)

        logits = interp(self.late_head, taps.z_late)
        preds = PredictiveTaps(
            ad.softmax_channels(interp(self.early_head, taps.z_early)),
            [ad.softmax_channels(interp(h, z)) for h, z in zip(self.mid_heads, taps.z_mid)],
            ad.softmax_channels(logits),
        )
        return taps, preds, logits

    def predict_logits(self, x: Tensor) -> Tensor:
        """Late-head logits only; the inference path needs nothing else."""
        self._check_input(x)
        taps = self.encode(x)
        H, W = self.cfg.input_size
        return ad.bilinear_resize(self.late_head(taps.z_late), H, W)


def build_teacher(cfg: NetConfig | None = None) -> TeacherNet:
    return TeacherNet(cfg or teacher_config())


def build_student(cfg: NetConfig | None = None) -> StudentNet:
    return StudentNet(cfg or student_config())


def forward_taps(net: SegNet, x, frozen: bool = False) -> tuple[FeatureTaps, PredictiveTaps, Tensor]:
    """All taps and the final logits from one pass; ``frozen`` records no graph."""
    x = ad.as_tensor(x)
    if frozen:
        with ad.no_grad():
            return net.forward(x)
    return net.forward(x)
