"""
Tensors, gradients and the building blocks
===========================================

A tour of the autodiff core and the layers the generators are made of.
Run with ``python demos/01_tensors_and_layers.py``.
"""

import numpy as np

from mtgan import nn, ops
from mtgan.tensor import Tensor

rng = np.random.default_rng(0)

# A Tensor wraps a numpy array. Leaves created with requires_grad=True collect
# gradients when backward() is called on a scalar built from them.
x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
y = ops.mean(ops.tanh(ops.conv2d(x, w, padding=1)))
y.backward()
print("loss", y.item())
print("dL/dx shape", x.grad.shape, "dL/dw shape", w.grad.shape)

# Central differences agree with the analytic gradient. Here we poke one
# weight by +-h and compare.
h = 1e-4
w_plus, w_minus = w.data.copy(), w.data.copy()
w_plus[0, 0, 1, 1] += h
w_minus[0, 0, 1, 1] -= h


def loss_at(weights):
    return ops.mean(ops.tanh(ops.conv2d(Tensor(x.data), Tensor(weights), padding=1))).item()


numeric = (loss_at(w_plus) - loss_at(w_minus)) / (2 * h)
print("analytic", w.grad[0, 0, 1, 1], "numeric", numeric)

# Transposed convolution is the adjoint of convolution: <conv(x), y> equals
# <x, conv_transpose(y)> for the same weights.
a = rng.normal(size=(1, 2, 8, 8))
k = rng.normal(size=(3, 2, 3, 3))
fwd = ops.conv2d(Tensor(a), Tensor(k), stride=2, padding=1).data
b = rng.normal(size=fwd.shape)
back = ops.conv2d_transpose(Tensor(b), Tensor(k), stride=2, padding=1, output_padding=1).data
print("adjoint check", np.sum(fwd * b), np.sum(a * back))

# The generators are encoder / residual / decoder stacks. A width-8 semantic
# generator at 64x64 is small enough to run instantly.
cfg = nn.semantic_config(base_width=8, image_size=(64, 64))
G = nn.build(cfg, seed=0)
print(f"{cfg.tag}: {G.count():,} parameters")
img = Tensor(rng.uniform(-1, 1, (1, 3, 64, 64)).astype(np.float32))
out = nn.generator_forward(img, G)
print("output", out.shape, "range", out.data.min(), out.data.max())

# The PatchGAN discriminator scores overlapping 70x70 patches. A 64x64 input
# gives a 6x6 grid of logits.
D = nn.build(nn.disc_config(3, base_width=8, image_size=(64, 64)), seed=1)
logits = nn.patchgan_forward(out, D)
print("patch logits", logits.shape)
