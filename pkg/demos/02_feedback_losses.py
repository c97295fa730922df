"""
Layer-selective feedback losses
===============================

The student never copies a teacher layer at the same depth. Knowledge moves
backward: the teacher's middle layers teach the student's early layer, and
the teacher's last layer teaches every student middle layer. This script
computes the four terms on real network taps and shows what each one cares
about.
"""

import numpy as np

from hlfd.autodiff import Tensor
from hlfd.losses import DistillConfig, attention_map, hlfd_total, ufd_loss, upd_loss
from hlfd.metrics import focal_dice_loss
from hlfd.nets import NetConfig, build_student, build_teacher, forward_taps

rng = np.random.default_rng(1)
size = (32, 32)
teacher = build_teacher(NetConfig(encoder_channels=(8, 16, 32, 64), input_size=size, seed=0))
student = build_student(NetConfig(encoder_channels=(4, 8, 16, 32), input_size=size, seed=1))
print(f"teacher {teacher.num_parameters():,} parameters, student {student.num_parameters():,}")

x = Tensor(rng.random((2, 1) + size))
mask = (rng.random((2,) + size) < 0.15).astype(np.int64)
feat_t, pred_t, _ = forward_taps(teacher, x, frozen=True)
feat_s, pred_s, logits = forward_taps(student, x)

print("teacher middle taps", [z.shape for z in feat_t.z_mid], "late", feat_t.z_late.shape)
print("student early tap  ", feat_s.z_early.shape, "middle", [z.shape for z in feat_s.z_mid])

# Attention maps sum |z|^2 over channels and normalize each sample to unit
# L2 norm, so only where a layer fires matters, not how loudly.
a = attention_map(feat_s.z_early).data
print("attention map norms per sample", np.round(np.sqrt((a.reshape(2, -1) ** 2).sum(axis=1)), 6))
loud = ufd_loss(Tensor(100 * feat_s.z_early.data), feat_t.z_mid).item()
quiet = ufd_loss(feat_s.z_early, feat_t.z_mid).item()
print(f"UFD at 1x and 100x activation scale: {quiet:.6g} vs {loud:.6g}")

# The pixel terms are KL(student || teacher), averaged over pixels after the
# student map is resized onto the teacher grid.
print("UPD with the student's own early map as target:",
      upd_loss(pred_s.p_early, [Tensor(pred_s.p_early.data)]).item())

parts = hlfd_total(focal_dice_loss(logits, mask), (feat_s, pred_s), (feat_t, pred_t), DistillConfig())
for name, value in parts.as_row().items():
    print(f"  {name:5s} {value:.6f}")
print("beta=0.9, lambda=0.1: l_h = l_seg + 0.9 * l_f + 0.1 * l_p =",
      round(parts.l_seg + 0.9 * parts.l_f + 0.1 * parts.l_p, 12))

# One backward pass reaches the first student convolution through all four
# terms; the teacher gets no gradient.
parts.total.backward()
print("student first-layer grad norm", float(np.linalg.norm(student.parameters()[0].grad)))
print("teacher grads present:", any(p.grad is not None for p in teacher.parameters()))
