"""Adversarial, cycle, SSIM reconstruction, depth and smoothness losses.

All reductions are means, so the loss weights carry over across image sizes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor

GAN_VARIANTS = ("log", "lsq")


class EmptyMaskWarning(UserWarning):
    """The sparse depth map had no valid pixels; the depth loss is 0."""


@dataclass(frozen=True)
class LossWeights:
    cyc_semantic: float = 10.0     # lambda_1
    rec_semantic: float = 2.0      # lambda_2
    cyc_depth: float = 10.0        # lambda_3
    rec_depth: float = 1.0         # lambda_4
    depth: float = 0.5             # lambda_5
    smooth: float = 0.5            # lambda_6

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")


def gan_loss_d(real_logits: Tensor, fake_logits: Tensor, variant: str = "log") -> Tensor:
    """Discriminator loss; ``fake_logits`` must come from a detached generator output."""
    if variant == "log":
        # -log(sigmoid(z)) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
        real = ops.mean(ops.softplus(ops.neg(real_logits)))
        fake = ops.mean(ops.softplus(fake_logits))
    elif variant == "lsq":
        real = ops.mean(ops.square(ops.sub(real_logits, 1.0)))
        fake = ops.mean(ops.square(fake_logits))
    else:
        raise ValueError(f"unknown GAN variant {variant!r}")
    return ops.mul(ops.add(real, fake), 0.5)


def gan_loss_g(fake_logits: Tensor, variant: str = "log") -> Tensor:
    """Non-saturating generator loss -mean(log sigmoid(fake))."""
    if variant == "log":
        return ops.mean(ops.softplus(ops.neg(fake_logits)))
    if variant == "lsq":
        return ops.mean(ops.square(ops.sub(fake_logits, 1.0)))
    raise ValueError(f"unknown GAN variant {variant!r}")


def cycle_loss(x: Tensor, x_rec: Tensor, y: Tensor, y_rec: Tensor) -> Tensor:
    return ops.add(ops.mean(ops.abs(ops.sub(x_rec, x))),
                   ops.mean(ops.abs(ops.sub(y_rec, y))))


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_RANGE = 2.0
SSIM_C1 = (0.01 * SSIM_RANGE) ** 2
SSIM_C2 = (0.03 * SSIM_RANGE) ** 2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Mean SSIM over channels and valid 11x11 Gaussian window positions."""
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise DimensionError(f"ssim: expected N x C x H x W, got {a.shape}")
    n, c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(f"ssim: H and W must be >= {SSIM_WINDOW}, got {h}x{w}")
    win = Tensor(gaussian_window()[None, None], dtype=a.dtype)
    flat = (n * c, 1, h, w)
    a1, b1 = ops.reshape(a, flat), ops.reshape(b, flat)

    def blur(t: Tensor) -> Tensor:
        return ops.conv2d(t, win)

    mu_a, mu_b = blur(a1), blur(b1)
    mu_aa, mu_bb, mu_ab = ops.square(mu_a), ops.square(mu_b), ops.mul(mu_a, mu_b)
    var_a = ops.sub(blur(ops.square(a1)), mu_aa)
    var_b = ops.sub(blur(ops.square(b1)), mu_bb)
    cov = ops.sub(blur(ops.mul(a1, b1)), mu_ab)
    num = ops.mul(ops.add(ops.mul(mu_ab, 2.0), SSIM_C1), ops.add(ops.mul(cov, 2.0), SSIM_C2))
    den = ops.mul(ops.add(ops.add(mu_aa, mu_bb), SSIM_C1),
                  ops.add(ops.add(var_a, var_b), SSIM_C2))
    return ops.mean(ops.div(num, den))


def rec_loss(x: Tensor, x_rec: Tensor, y: Tensor, y_rec: Tensor) -> Tensor:
    return ops.add(ops.neg(ops.add(ssim(x, x_rec), ssim(y, y_rec))), 2.0)


def depth_loss(pred: Tensor, sparse: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over measured pixels.

    ``mask`` marks measured pixels; by default those with ``sparse > 0``. Pass
    it explicitly when ``sparse`` is already normalized and 0 no longer means
    "missing".
    """
    if pred.shape != sparse.shape:
        raise DimensionError(f"depth_loss: shape mismatch {pred.shape} vs {sparse.shape}")
    valid = (sparse.data > 0) if mask is None else np.asarray(mask, dtype=bool)
    if valid.shape != pred.shape:
        raise DimensionError(f"depth_loss: mask shape {valid.shape} != {pred.shape}")
    count = int(valid.sum())
    if count == 0:
        warnings.warn("depth_loss: sparse map has no valid pixels", EmptyMaskWarning,
                      stacklevel=2)
        return ops.mul(ops.sum(pred), 0.0)
    m = Tensor(valid.astype(pred.dtype))
    diff = ops.mul(ops.sub(pred, sparse), m)
    return ops.mul(ops.sum(ops.square(diff)), 1.0 / count)


def _second_diff_x(d: Tensor) -> Tensor:
    return ops.add(ops.sub(d[:, :, :, :-2], ops.mul(d[:, :, :, 1:-1], 2.0)), d[:, :, :, 2:])


def _second_diff_y(d: Tensor) -> Tensor:
    return ops.add(ops.sub(d[:, :, :-2, :], ops.mul(d[:, :, 1:-1, :], 2.0)), d[:, :, 2:, :])


def edge_weights(guide: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """exp(-channel-mean |forward difference|), aligned with second-difference centres."""
    gx = np.abs(guide[:, :, :, 1:] - guide[:, :, :, :-1]).mean(axis=1, keepdims=True)
    gy = np.abs(guide[:, :, 1:, :] - guide[:, :, :-1, :]).mean(axis=1, keepdims=True)
    return np.exp(-gx[:, :, :, 1:]), np.exp(-gy[:, :, 1:, :])


def smoothness_loss(pred: Tensor, guide: Tensor) -> Tensor:
    """Second-order depth smoothness, down-weighted across guide-image edges.

    ``guide`` is the generated semantic image (or RGB for the ablation). Its
    gradient enters only through constant weights, so no gradient flows into it.
    """
    if pred.ndim != 4 or guide.ndim != 4 or pred.shape[1] != 1:
        raise DimensionError(f"smoothness_loss: need N x 1 x H x W depth, got {pred.shape}")
    if (pred.shape[0],) + pred.shape[2:] != (guide.shape[0],) + guide.shape[2:]:
        raise DimensionError(f"smoothness_loss: N/H/W differ, {pred.shape} vs {guide.shape}")
    h, w = pred.shape[2:]
    if h < 3 or w < 3:
        raise DimensionError(f"smoothness_loss: H and W must be >= 3, got {h}x{w}")
    wx, wy = edge_weights(guide.data)
    tx = ops.mean(ops.mul(ops.abs(_second_diff_x(pred)), Tensor(wx, dtype=pred.dtype)))
    ty = ops.mean(ops.mul(ops.abs(_second_diff_y(pred)), Tensor(wy, dtype=pred.dtype)))
    return ops.add(tx, ty)


def _term(v):
    return v if isinstance(v, Tensor) else float(v)


def _weighted(total, value, weight: float):
    value = _term(value)
    if isinstance(value, Tensor):
        return ops.add(ops.mul(value, weight), total)
    return total + weight * value


def semantic_objective(gan_g, gan_f, cyc, rec, weights: LossWeights = LossWeights()):
    """GAN(G_s) + GAN(F_s) + lambda_1 cyc + lambda_2 rec (generator side)."""
    total = _weighted(_term(gan_g), gan_f, 1.0)
    total = _weighted(total, cyc, weights.cyc_semantic)
    return _weighted(total, rec, weights.rec_semantic)


def depth_objective(gan_g, gan_f, cyc, rec, depth, smooth,
                    weights: LossWeights = LossWeights()):
    """Depth-branch generator objective with lambda_3..lambda_6."""
    total = _weighted(_term(gan_g), gan_f, 1.0)
    total = _weighted(total, cyc, weights.cyc_depth)
    total = _weighted(total, rec, weights.rec_depth)
    total = _weighted(total, depth, weights.depth)
    return _weighted(total, smooth, weights.smooth)
