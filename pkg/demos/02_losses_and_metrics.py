"""
Losses and evaluation metrics
=============================

Each training loss and each reported metric on small hand-made inputs.
Run with ``python demos/02_losses_and_metrics.py``.
"""

import math

import numpy as np

from mtgan import evaluation as ev, losses, ops
from mtgan.tensor import Tensor

rng = np.random.default_rng(1)

# At logit 0 the discriminator cannot tell real from fake, and both GAN
# losses sit at ln 2.
zero = Tensor(np.zeros((1, 1, 6, 6)))
print("GAN losses at 0:", losses.gan_loss_d(zero, zero).item(), losses.gan_loss_g(zero).item(),
      "ln 2 =", math.log(2))

# Cycle loss is an L1 reconstruction error in both directions.
x = Tensor(rng.uniform(-1, 1, (1, 3, 16, 16)))
print("cycle loss, perfect reconstruction:", losses.cycle_loss(x, x, x, x).item())
shifted = ops.add(x, 0.1)
print("cycle loss, both off by 0.1:", round(losses.cycle_loss(x, shifted, x, shifted).item(), 6))

# SSIM is 1 for identical images and drops as structure is destroyed.
noisy = Tensor(np.clip(x.data + rng.normal(0, 0.3, x.shape), -1, 1))
print("SSIM(x, x) =", losses.ssim(x, x).item(), " SSIM(x, noisy) =", round(losses.ssim(x, noisy).item(), 3))

# The depth loss only looks at pixels where the sparse map has a measurement.
sparse = np.zeros((1, 1, 8, 8))
sparse[0, 0, ::3, ::2] = 0.4
pred = Tensor(np.full((1, 1, 8, 8), 0.5))
print("depth loss with every prediction 0.1 too far:", losses.depth_loss(pred, Tensor(sparse)).item())

# The smoothness loss penalizes curvature, not slope, and forgives it where
# the guide image has an edge. A planar ramp costs nothing.
ramp = Tensor(np.add.outer(np.arange(8.0), 0.5 * np.arange(8.0))[None, None])
flat_guide = Tensor(np.zeros((1, 3, 8, 8)))
print("smoothness of a ramp:", losses.smoothness_loss(ramp, flat_guide).item())
step = np.zeros((1, 1, 8, 8))
step[..., 4:] = 1.0
edge_guide = np.zeros((1, 3, 8, 8))
edge_guide[..., 4:] = 3.0
print("depth step, no guide edge:", round(losses.smoothness_loss(Tensor(step), flat_guide).item(), 4),
      " with a guide edge in the same place:",
      round(losses.smoothness_loss(Tensor(step), Tensor(edge_guide)).item(), 4))

# Segmentation metrics come from one confusion matrix over non-ignored pixels.
palette = ev.cityscapes_palette()
gt = rng.integers(0, 19, (32, 32))
pred_ids = np.where(rng.random(gt.shape) < 0.8, gt, rng.integers(0, 19, gt.shape))
m = ev.seg_metrics(pred_ids, gt, palette)
print(f"pixel acc {m.per_pixel_acc:.3f}  class acc {m.per_class_acc:.3f}  mean IoU {m.mean_iou:.3f}")

# Generated semantic images are RGB. align_palette snaps every pixel to its
# nearest palette color before scoring.
smudged = np.clip(palette.colorize(gt).astype(int) + rng.integers(-20, 21, (32, 32, 3)), 0, 255)
print("labels recovered after alignment:", np.mean(ev.align_palette(smudged, palette) == gt))

# Depth is scored after rescaling the prediction so its median matches the
# ground truth; a prediction off by a global factor scores perfectly.
gt_mm = rng.uniform(2000, 18000, (16, 16))
aligned, factor = ev.median_scale_align(0.25 * gt_mm, gt_mm)
d = ev.depth_metrics(aligned, gt_mm)
print(f"scale factor {factor}, RMSE {d.rmse_mm} mm, MAE {d.mae_mm} mm")
