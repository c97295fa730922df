"""
Synthetic CT-like slices and the file formats
=============================================

Real KiTS/LiTS volumes are out of reach at desk scale, so the experiments
use bright elliptical blobs on a smooth noisy background. This script
generates a handful, windows a raw Hounsfield ramp, round-trips the SEGV1
and checkpoint formats and writes a few Netpbm previews into demo_out/.
"""

from pathlib import Path

import numpy as np

from hlfd.checkpoint import file_digest, load_checkpoint, save_checkpoint
from hlfd.data import (KIDNEY_WINDOW, LIVER_WINDOW, SynthConfig, augment, load_segv, save_segv, split,
                       synth_generate, window_hu)
from hlfd.metrics import write_pgm, write_ppm_overlay
from hlfd.nets import build_student

out = Path("demo_out")
out.mkdir(exist_ok=True)

samples = synth_generate(SynthConfig(count=12, seed=3))
fg = [s.mask.mean() for s in samples]
print(f"{len(samples)} samples of {samples[0].image.shape}, foreground {min(fg):.3f}..{max(fg):.3f}")

# HU windowing clamps to [center - width/2, center + width/2] and rescales.
hu = np.linspace(-200, 400, 7)
print("HU        ", hu)
print("liver win ", np.round(window_hu(hu, *LIVER_WINDOW), 3))
print("kidney win", np.round(window_hu(hu, *KIDNEY_WINDOW), 3))

# Dihedral augmentation moves image and mask together.
rng = np.random.default_rng(0)
flipped = augment(samples[0], rng, 5)
print("mask pixels before/after augment:", samples[0].mask.sum(), flipped.mask.sum())

for s in samples[:3]:
    write_pgm(out / f"{s.id}.pgm", s.image[0])
    write_ppm_overlay(out / f"{s.id}_mask.ppm", s.image[0], s.mask.astype(bool))
print("previews written to", out.resolve())

save_segv(out / "demo.segv1", samples)
back = load_segv(out / "demo.segv1")
print("SEGV1 round trip exact:", all(a.equals(b) for a, b in zip(samples, back)))

train, test = split(samples, 5 / 6, seed=0)
print("split:", len(train), "train /", len(test), "test")

net = build_student()
save_checkpoint(out / "student.ckpt", net)
again = load_checkpoint(out / "student.ckpt")
print("checkpoint round trip exact:",
      all(a.data.tobytes() == b.data.tobytes() for a, b in zip(net.parameters(), again.parameters())),
      "| sha256", file_digest(out / "student.ckpt")[:16])
