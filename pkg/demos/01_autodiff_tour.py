"""
A tour of the tensor engine
===========================

Every network in hlfd runs on a small reverse-mode autodiff engine over
float64 numpy arrays. This script builds a few graphs by hand, pulls
gradients out of them and checks those against central differences.
"""

import numpy as np

from hlfd import autodiff as ad
from hlfd.autodiff import Tensor

# Scalars first: f(x, y) = x * y + exp(x), so df/dx = y + exp(x) and df/dy = x.
x = Tensor(np.array(1.5), requires_grad=True)
y = Tensor(np.array(-2.0), requires_grad=True)
f = x * y + ad.exp(x)
f.backward()
print("f =", f.item())
print("df/dx =", x.grad, " expected", -2.0 + np.exp(1.5))
print("df/dy =", y.grad, " expected", 1.5)

# Broadcasting is undone on the way back: the bias gradient sums over the
# batch and spatial axes it was broadcast across.
rng = np.random.default_rng(0)
feat = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
bias = Tensor(np.zeros((1, 3, 1, 1)), requires_grad=True)
(feat + bias).sum().backward()
print("bias grad shape", bias.grad.shape, "values", bias.grad.ravel())  # 2 * 4 * 4 = 32 each

# A conv -> relu -> pool -> upsample chain, the same building blocks the
# UNet uses.
img = Tensor(rng.random((1, 1, 8, 8)))
w = Tensor(rng.standard_normal((4, 1, 3, 3)) * 0.3, requires_grad=True)
h = ad.relu(ad.conv2d(img, w, padding=1))
h = ad.bilinear_resize(ad.max_pool2(h), 8, 8)
loss = (h ** 2).mean()
loss.backward()
print("conv chain loss", round(loss.item(), 6), "| weight grad norm", round(float(np.linalg.norm(w.grad)), 6))

# gradcheck reports the worst |analytic - numeric| / max(1, |a|, |n|) over
# every input entry.
err = ad.gradcheck(lambda a, k: (ad.relu(ad.conv2d(a, k, padding=1)) ** 2).mean(),
                   [img.data, w.data])
print(f"gradcheck on the conv chain: {err:.2e}")

# Softmax over the channel axis, the head of every predictive map.
logits = Tensor(rng.standard_normal((1, 2, 3, 3)))
p = ad.softmax_channels(logits)
print("channel sums", np.round(p.data.sum(axis=1), 12).ravel())

# Inside no_grad nothing is recorded, which is how the frozen teacher runs.
with ad.no_grad():
    frozen = ad.conv2d(img, w, padding=1)
print("requires_grad inside no_grad:", frozen.requires_grad)
