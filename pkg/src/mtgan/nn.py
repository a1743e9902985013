"""Generator and PatchGAN discriminator architectures.

Parameters live in :class:`ModelParams` (an ordered name -> Tensor map); the
forward functions are plain functions of (input, params). Generators use
reflection padding, discriminators zero padding.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor

ARCH_TAGS = ("gen_semantic", "gen_semantic_inv", "gen_depth", "gen_depth_inv", "patch_disc")
GENERATOR_TAGS = ARCH_TAGS[:4]
DEFAULT_MSSP_KERNELS = ((1, 1), (4, 4), (9, 9))


@dataclass(frozen=True)
class ArchConfig:
    tag: str
    in_channels: int
    out_channels: int
    base_width: int = 64
    n_residual: int = 6
    use_mssp: bool = False
    mssp_kernels: tuple = DEFAULT_MSSP_KERNELS
    image_size: tuple = (256, 256)

    def __post_init__(self):
        if self.tag not in ARCH_TAGS:
            raise ValueError(f"unknown architecture tag {self.tag!r}")
        if self.tag != "patch_disc" and self.n_residual < 1:
            raise ValueError("n_residual must be >= 1")
        if self.use_mssp and self.in_channels < 3:
            raise ValueError("MSSP needs an RGB input (>= 3 channels)")
        if self.use_mssp and any(k > min(self.image_size) for kk in self.mssp_kernels for k in kk):
            raise ValueError(f"MSSP kernels {self.mssp_kernels} exceed image size {self.image_size}")


def semantic_config(base_width: int = 64, image_size=(256, 256), inverse: bool = False,
                    use_mssp: bool = True, mssp_kernels=DEFAULT_MSSP_KERNELS) -> ArchConfig:
    return ArchConfig("gen_semantic_inv" if inverse else "gen_semantic", 3, 3, base_width, 6,
                      use_mssp, tuple(mssp_kernels), tuple(image_size))


def depth_config(base_width: int = 64, image_size=(256, 512), inverse: bool = False) -> ArchConfig:
    return ArchConfig("gen_depth_inv" if inverse else "gen_depth", 7, 1, base_width, 9, False,
                      (), tuple(image_size))


def disc_config(in_channels: int, base_width: int = 64, image_size=(256, 256)) -> ArchConfig:
    return ArchConfig("patch_disc", in_channels, 1, base_width, 0, False, (), tuple(image_size))


@dataclass
class ModelParams:
    config: ArchConfig
    tensors: dict = field(default_factory=dict)

    @property
    def tag(self) -> str:
        return self.config.tag

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                         for k, v in self.tensors.items()})

    def frozen(self) -> "ModelParams":
        """Same values, no gradient tracking."""
        return ModelParams(self.config, {k: v.detach() for k, v in self.tensors.items()})


# -- parameter layout ---------------------------------------------------------------

def _conv_shapes(prefix: str, cout: int, cin: int, k: int) -> list:
    return [(f"{prefix}.weight", (cout, cin, k, k)), (f"{prefix}.bias", (cout,))]


def _norm_shapes(prefix: str, c: int) -> list:
    return [(f"{prefix}.gamma", (c,)), (f"{prefix}.beta", (c,))]


def _mssp_in_channels(cfg: ArchConfig) -> int:
    return 6 * (1 + len(cfg.mssp_kernels))


def param_shapes(cfg: ArchConfig) -> list:
    """Ordered (name, shape) list for an architecture."""
    w = cfg.base_width
    shapes: list = []
    if cfg.tag == "patch_disc":
        widths = [cfg.in_channels, w, 2 * w, 4 * w, 8 * w]
        for i in range(4):
            shapes += _conv_shapes(f"c{i}", widths[i + 1], widths[i], 4)
            if i > 0:
                shapes += _norm_shapes(f"n{i}", widths[i + 1])
        shapes += _conv_shapes("out", 1, 8 * w, 4)
        return shapes

    shapes += _conv_shapes("enc0", w, cfg.in_channels, 7) + _norm_shapes("enc0n", w)
    shapes += _conv_shapes("down1", 2 * w, w, 3) + _norm_shapes("down1n", 2 * w)
    shapes += _conv_shapes("down2", 4 * w, 2 * w, 3) + _norm_shapes("down2n", 4 * w)
    for r in range(cfg.n_residual):
        shapes += _conv_shapes(f"res{r}.c1", 4 * w, 4 * w, 3) + _norm_shapes(f"res{r}.n1", 4 * w)
        shapes += _conv_shapes(f"res{r}.c2", 4 * w, 4 * w, 3) + _norm_shapes(f"res{r}.n2", 4 * w)
    # transpose-conv weights are Cin x Cout x k x k
    shapes += [("up1.weight", (4 * w, 2 * w, 3, 3)), ("up1.bias", (2 * w,))]
    shapes += _norm_shapes("up1n", 2 * w)
    shapes += [("up2.weight", (2 * w, w, 3, 3)), ("up2.bias", (w,))]
    shapes += _norm_shapes("up2n", w)
    shapes += _conv_shapes("out", cfg.out_channels, w, 7)
    if cfg.use_mssp:
        shapes += _conv_shapes("mssp", 3, _mssp_in_channels(cfg), 3)
    return shapes


def _stream(seed: int, tag: str, name: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(tag.encode()), zlib.crc32(name.encode())]))


def init_weights(params: ModelParams, seed: int) -> ModelParams:
    """Conv weights ~ N(0, 0.02), norm gamma ~ N(1, 0.02), biases and beta zero."""
    for name, t in params.items():
        if name.endswith(".weight"):
            t.data[...] = _stream(seed, params.tag, name).normal(0.0, 0.02, t.shape)
        elif name.endswith(".gamma"):
            t.data[...] = _stream(seed, params.tag, name).normal(1.0, 0.02, t.shape)
        else:
            t.data[...] = 0.0
        t.grad = None
    return params


def build(cfg: ArchConfig, seed: int | None = 0) -> ModelParams:
    params = ModelParams(cfg, {name: Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
                               for name, shape in param_shapes(cfg)})
    if seed is not None:
        init_weights(params, seed)
    return params


# -- forward passes -------------------------------------------------------------------

def _conv(x: Tensor, p: ModelParams, name: str, stride: int = 1, padding: int = 0) -> Tensor:
    return ops.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride, padding)


def _norm(x: Tensor, p: ModelParams, name: str) -> Tensor:
    return ops.instance_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"])


def residual_block(x: Tensor, p: ModelParams, name: str) -> Tensor:
    """x + IN(conv(relu(IN(conv(x))))), reflection padded to keep H x W."""
    c = p[f"{name}.c1.weight"].shape[1]
    if x.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"residual_block {name}: expected {c} channels, got shape {x.shape}")
    h = _conv(ops.reflection_pad2d(x, 1), p, f"{name}.c1")
    h = ops.relu(_norm(h, p, f"{name}.n1"))
    h = _conv(ops.reflection_pad2d(h, 1), p, f"{name}.c2")
    return ops.add(x, _norm(h, p, f"{name}.n2"))


def _pool_restore(z: Tensor, kh: int, kw: int) -> Tensor:
    """Average-pool with stride = kernel, then nearest-upsample back to z's size."""
    if (kh, kw) == (1, 1):
        return z
    if kh != kw:
        raise DimensionError(f"mssp: only square pooling kernels supported, got {(kh, kw)}")
    h, w = z.shape[2:]
    ph, pw = (-h) % kh, (-w) % kw
    zp = ops.reflection_pad2d(z, (0, ph, 0, pw)) if ph or pw else z
    up = ops.upsample_nearest(ops.avg_pool2d(zp, (kh, kw)), kh)
    if ph or pw:
        up = up[:, :, :h, :w]
    return up


def mssp_block(decoder_out: Tensor, rgb_in: Tensor, p: ModelParams) -> Tensor:
    """Multi-scale spatial pooling over concat(decoder output, input RGB)."""
    if decoder_out.ndim != 4 or rgb_in.ndim != 4:
        raise DimensionError("mssp_block: inputs must be N x C x H x W")
    if decoder_out.shape[1] != 3 or rgb_in.shape[1] != 3:
        raise DimensionError(
            f"mssp_block: expected 3-channel inputs, got {decoder_out.shape} and {rgb_in.shape}")
    if (decoder_out.shape[0],) + decoder_out.shape[2:] != (rgb_in.shape[0],) + rgb_in.shape[2:]:
        raise DimensionError(
            f"mssp_block: N/H/W differ between {decoder_out.shape} and {rgb_in.shape}")
    z = ops.concat_channels([decoder_out, rgb_in])
    branches = [z] + [_pool_restore(z, kh, kw) for kh, kw in p.config.mssp_kernels]
    fused = ops.concat_channels(branches)
    return ops.tanh(_conv(ops.reflection_pad2d(fused, 1), p, "mssp"))


def generator_forward(x: Tensor, p: ModelParams) -> Tensor:
    cfg = p.config
    if cfg.tag not in GENERATOR_TAGS:
        raise ValueError(f"generator_forward: {cfg.tag!r} is not a generator")
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"generator_forward ({cfg.tag}): expected {cfg.in_channels} input channels "
            f"(axis 1), got shape {x.shape}")
    h, w = x.shape[2:]
    if h % 4 or w % 4:
        raise DimensionError(f"generator_forward: H and W must be divisible by 4, got {h}x{w}")

    y = ops.relu(_norm(_conv(ops.reflection_pad2d(x, 3), p, "enc0"), p, "enc0n"))
    y = ops.relu(_norm(_conv(y, p, "down1", stride=2, padding=1), p, "down1n"))
    y = ops.relu(_norm(_conv(y, p, "down2", stride=2, padding=1), p, "down2n"))
    for r in range(cfg.n_residual):
        y = residual_block(y, p, f"res{r}")
    y = ops.conv2d_transpose(y, p["up1.weight"], p["up1.bias"], 2, 1, output_padding=1)
    y = ops.relu(_norm(y, p, "up1n"))
    y = ops.conv2d_transpose(y, p["up2.weight"], p["up2.bias"], 2, 1, output_padding=1)
    y = ops.relu(_norm(y, p, "up2n"))
    y = ops.tanh(_conv(ops.reflection_pad2d(y, 3), p, "out"))
    if cfg.use_mssp:
        rgb = x if cfg.in_channels == 3 else x[:, :3]
        y = mssp_block(y, rgb, p)
    return y


PATCH_RECEPTIVE_FIELD = 70
PATCH_MIN_INPUT = 24


def patchgan_output_size(size: int) -> int:
    for _ in range(3):
        size = ops.conv_output_size(size, 4, 2, 1)
    for _ in range(2):
        size = ops.conv_output_size(size, 4, 1, 1)
    return size


def patchgan_forward(x: Tensor, p: ModelParams, normalize: bool = True) -> Tensor:
    """70x70 PatchGAN logits, N x 1 x h x w.

    ``normalize=False`` skips instance norm, leaving a purely local conv stack
    (used to measure the receptive field; norm statistics couple all pixels).
    """
    if p.tag != "patch_disc":
        raise ValueError(f"patchgan_forward: {p.tag!r} is not a discriminator")
    if x.ndim != 4 or x.shape[1] != p.config.in_channels:
        raise DimensionError(
            f"patchgan_forward: expected {p.config.in_channels} input channels, got {x.shape}")
    h, w = x.shape[2:]
    if min(h, w) < PATCH_MIN_INPUT:
        raise DimensionError(
            f"patchgan_forward: input {h}x{w} smaller than minimum {PATCH_MIN_INPUT}")
    y = x
    for i, stride in enumerate((2, 2, 2, 1)):
        y = _conv(y, p, f"c{i}", stride=stride, padding=1)
        if i > 0 and normalize:
            y = _norm(y, p, f"n{i}")
        y = ops.leaky_relu(y, 0.2)
    return _conv(y, p, "out", stride=1, padding=1)


def parameters(models: Sequence[ModelParams]) -> list:
    return [t for m in models for t in m.values()]
