import numpy as np
import pytest

from mtgan import nn, ops
from mtgan.tensor import DimensionError, Tensor


def zero_params(cfg):
    return nn.build(cfg, seed=None)


# -- parameter layout -------------------------------------------------------------

def tally_generator(cin, cout, w, n_res, mssp_branches):
    """Independent per-layer arithmetic: conv = k*k*cin*cout + cout, norm = 2*c."""
    def conv(k, a, b):
        return k * k * a * b + b

    total = conv(7, cin, w) + 2 * w
    total += conv(3, w, 2 * w) + 2 * 2 * w
    total += conv(3, 2 * w, 4 * w) + 2 * 4 * w
    total += n_res * 2 * (conv(3, 4 * w, 4 * w) + 2 * 4 * w)
    total += conv(3, 4 * w, 2 * w) + 2 * 2 * w      # transpose conv, same count
    total += conv(3, 2 * w, w) + 2 * w
    total += conv(7, w, cout)
    if mssp_branches:
        total += conv(3, 6 * mssp_branches, 3)
    return total


def test_semantic_generator_param_count():
    p = nn.build(nn.semantic_config(64), seed=None)
    assert p.count() == tally_generator(3, 3, 64, 6, 4)
    assert p.count() == 7_845_774


def test_depth_generator_param_count():
    p = nn.build(nn.depth_config(64), seed=None)
    assert p.count() == tally_generator(7, 1, 64, 9, 0)


def test_discriminator_param_count():
    p = nn.build(nn.disc_config(3, 64), seed=None)
    widths = [3, 64, 128, 256, 512]
    expected = sum(16 * a * b + b for a, b in zip(widths, widths[1:]))
    expected += 2 * (128 + 256 + 512) + 16 * 512 + 1
    assert p.count() == expected


def test_semantic_and_depth_generators_differ_only_as_configured():
    s, d = nn.semantic_config(16), nn.depth_config(16)
    assert (s.n_residual, d.n_residual) == (6, 9)
    assert (s.in_channels, d.in_channels) == (3, 7)
    assert (s.out_channels, d.out_channels) == (3, 1)
    assert s.use_mssp and not d.use_mssp
    assert s.base_width == d.base_width
    names_s = {n for n, _ in nn.param_shapes(s) if not n.startswith(("res", "mssp"))}
    names_d = {n for n, _ in nn.param_shapes(d) if not n.startswith("res")}
    assert names_s == names_d


def test_discriminators_identical_up_to_input_channels():
    a = dict(nn.param_shapes(nn.disc_config(3, 16)))
    b = dict(nn.param_shapes(nn.disc_config(1, 16)))
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == ["c0.weight"]


def test_arch_config_validation():
    with pytest.raises(ValueError):
        nn.ArchConfig("gen_semantic", 3, 3, n_residual=0)
    with pytest.raises(ValueError):
        nn.ArchConfig("unknown", 3, 3)
    with pytest.raises(ValueError):
        nn.semantic_config(8, image_size=(8, 8))


# -- init -------------------------------------------------------------------------

def test_init_deterministic_and_moments():
    a = nn.build(nn.semantic_config(64), seed=3)
    b = nn.build(nn.semantic_config(64), seed=3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    w = a["res0.c1.weight"].data.astype(np.float64)
    assert abs(w.mean()) < 3 * 0.02 / np.sqrt(w.size)
    assert abs(w.std() - 0.02) < 0.05 * 0.02
    g = a["res0.n1.gamma"].data
    assert abs(g.mean() - 1) < 0.01
    assert np.all(a["res0.c1.bias"].data == 0) and np.all(a["res0.n1.beta"].data == 0)


def test_init_streams_independent_across_tags():
    a = nn.build(nn.semantic_config(16), seed=0)["enc0.weight"].data.ravel()
    b = nn.build(nn.semantic_config(16, inverse=True), seed=0)["enc0.weight"].data.ravel()
    assert not np.any(a[:32] == b[:32])
    c = nn.build(nn.semantic_config(16), seed=0)["down1.weight"].data.ravel()
    assert not np.any(a[:32] == c[:32])


# -- residual block ------------------------------------------------------------------

def test_residual_identity_with_zero_weights(rng):
    p = zero_params(nn.semantic_config(4))
    x = Tensor(rng.normal(size=(2, 16, 5, 7)).astype(np.float32), requires_grad=True)
    out = nn.residual_block(x, p, "res0")
    np.testing.assert_array_equal(out.data, x.data)
    up = rng.normal(size=x.shape).astype(np.float32)
    ops.sum(ops.mul(out, Tensor(up))).backward()
    np.testing.assert_allclose(x.grad, up, atol=1e-6)


@pytest.mark.parametrize("hw", [(3, 3), (4, 9), (10, 6)])
def test_residual_preserves_shape(rng, hw):
    p = nn.build(nn.semantic_config(4))
    x = Tensor(rng.normal(size=(1, 16) + hw))
    assert nn.residual_block(x, p, "res1").shape == x.shape
    with pytest.raises(DimensionError):
        nn.residual_block(Tensor(np.zeros((1, 8) + hw)), p, "res1")


# -- MSSP ------------------------------------------------------------------------------

def test_mssp_unit_kernel_reduces_to_single_conv(rng):
    cfg = nn.semantic_config(4, image_size=(8, 8), mssp_kernels=((1, 1),))
    p = nn.build(cfg, seed=1)
    d = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)))
    r = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)))
    z = ops.concat_channels([d, r])
    ref = ops.tanh(ops.conv2d(ops.reflection_pad2d(ops.concat_channels([z, z]), 1),
                              p["mssp.weight"], p["mssp.bias"]))
    np.testing.assert_array_equal(nn.mssp_block(d, r, p).data, ref.data)


def test_mssp_constant_in_constant_out():
    p = nn.build(nn.semantic_config(4, image_size=(20, 20)), seed=2)
    c = Tensor(np.full((1, 3, 20, 20), 0.3))
    out = nn.mssp_block(c, Tensor(np.full((1, 3, 20, 20), -0.6)), p).data
    np.testing.assert_allclose(out, out[0, :, :1, :1] * np.ones_like(out), atol=1e-6)


@pytest.mark.parametrize("hw", [(16, 16), (20, 13), (9, 30)])
def test_mssp_range_and_non_divisible_sizes(rng, hw):
    p = nn.build(nn.semantic_config(4, image_size=hw), seed=5)
    for t in p.values():
        t.data[...] = rng.normal(0, 1.0, t.shape)
    out = nn.mssp_block(Tensor(rng.normal(size=(2, 3) + hw) * 5), Tensor(rng.normal(size=(2, 3) + hw) * 5), p)
    assert out.shape == (2, 3) + hw
    assert np.abs(out.data).max() <= 1.0


def test_mssp_pooled_branch_matches_block_means():
    """A (4,4) branch holds each 4x4 block mean, repeated over the block."""
    z = Tensor(np.arange(64, dtype=float).reshape(1, 1, 8, 8))
    up = nn._pool_restore(z, 4, 4).data[0, 0]
    blocks = z.data[0, 0].reshape(2, 4, 2, 4).mean(axis=(1, 3))
    np.testing.assert_array_equal(up, np.kron(blocks, np.ones((4, 4))))


# -- generators ---------------------------------------------------------------------------

@pytest.mark.parametrize("cfg_fn", [nn.semantic_config, nn.depth_config])
@pytest.mark.parametrize("hw", [(16, 16), (24, 36)])
def test_generator_shape_and_range(rng, cfg_fn, hw):
    cfg = cfg_fn(8, image_size=hw)
    p = nn.build(cfg, seed=0)
    x = Tensor(rng.uniform(-1, 1, (2, cfg.in_channels) + hw).astype(np.float32))
    out = nn.generator_forward(x, p)
    assert out.shape == (2, cfg.out_channels) + hw
    assert np.abs(out.data).max() <= 1.0


def test_generator_input_errors():
    p = nn.build(nn.depth_config(4, image_size=(16, 16)))
    with pytest.raises(DimensionError, match="7 input channels"):
        nn.generator_forward(Tensor(np.zeros((1, 3, 16, 16))), p)
    with pytest.raises(DimensionError, match="divisible by 4"):
        nn.generator_forward(Tensor(np.zeros((1, 7, 18, 16))), p)


def test_depth_generator_full_resolution():
    p = nn.build(nn.depth_config(64, image_size=(256, 512)), seed=0)
    x = np.random.default_rng(0).uniform(-1, 1, (1, 7, 256, 512)).astype(np.float32)
    out = nn.generator_forward(Tensor(x), p.frozen())
    assert out.shape == (1, 1, 256, 512)
    assert np.all(np.abs(out.data) < 1)


def test_generator_gradients_reach_every_parameter(rng):
    p = nn.build(nn.semantic_config(4, image_size=(16, 16)), seed=0)
    out = nn.generator_forward(Tensor(rng.uniform(-1, 1, (1, 3, 16, 16))), p)
    ops.mean(ops.square(out)).backward()
    missing = [k for k, t in p.items() if t.grad is None or not np.any(t.grad)]
    # betas of norms followed by another norm-free path still get gradient; nothing is dead
    assert missing == []


# -- PatchGAN -------------------------------------------------------------------------------

def test_patchgan_output_size():
    assert nn.patchgan_output_size(256) == 30
    p = nn.build(nn.disc_config(3, 2, image_size=(256, 256)), seed=0)
    out = nn.patchgan_forward(Tensor(np.zeros((1, 3, 256, 256))), p)
    assert out.shape == (1, 1, 30, 30)


def test_patchgan_zero_weights_give_half():
    p = zero_params(nn.disc_config(1, 4, image_size=(70, 70)))
    logits = nn.patchgan_forward(Tensor(np.random.default_rng(0).normal(size=(2, 1, 70, 70))), p)
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_array_equal(ops.sigmoid(logits).data, 0.5)


def test_patchgan_rejects_small_input():
    p = nn.build(nn.disc_config(3, 4))
    with pytest.raises(DimensionError):
        nn.patchgan_forward(Tensor(np.zeros((1, 3, 20, 64))), p)


def _field(p, size, i, j):
    """Input pixels with nonzero d logit[i, j] / d input."""
    x = Tensor(np.random.default_rng(1).normal(size=(1, 1, size, size)), requires_grad=True)
    out = nn.patchgan_forward(x, p, normalize=False)
    sel = np.zeros(out.shape)
    sel[0, 0, i, j] = 1.0
    ops.sum(ops.mul(out, Tensor(sel))).backward()
    rows, cols = np.nonzero(x.grad[0, 0])
    return rows.min(), rows.max(), cols.min(), cols.max()


def test_patchgan_receptive_field_is_70():
    p = nn.build(nn.disc_config(1, 2, image_size=(96, 96)), seed=0)
    p = nn.ModelParams(p.config, {k: Tensor(v.data.astype(np.float64), requires_grad=True)
                                  for k, v in p.items()})
    n = nn.patchgan_output_size(96)
    r0, r1, c0, c1 = _field(p, 96, n // 2, n // 2)
    assert (r1 - r0 + 1, c1 - c0 + 1) == (nn.PATCH_RECEPTIVE_FIELD,) * 2
    # consecutive logits step by the total stride of 8
    r0b, _, c0b, _ = _field(p, 96, n // 2 + 1, n // 2 + 1)
    assert (r0b - r0, c0b - c0) == (8, 8)


def test_patchgan_perturbation_oracle():
    """Moving one pixel changes exactly the logits whose 70x70 field covers it."""
    size = 96
    p = nn.build(nn.disc_config(1, 2, image_size=(size, size)), seed=4)
    p = nn.ModelParams(p.config, {k: Tensor(v.data.astype(np.float64)) for k, v in p.items()})
    x = np.random.default_rng(2).normal(size=(1, 1, size, size))
    base = nn.patchgan_forward(Tensor(x), p, normalize=False).data[0, 0]
    n = base.shape[0]
    # field of logit (i, j) starts at 8*i - 23 (padding 1 at each layer, strides 2,2,2,1,1)
    start = 8 * np.arange(n) - 23
    for py, px in [(0, 0), (40, 57), (95, 12), (33, 33)]:
        xp = x.copy()
        xp[0, 0, py, px] += 1.0
        changed = nn.patchgan_forward(Tensor(xp), p, normalize=False).data[0, 0] != base
        covers_r = (start <= py) & (py < start + nn.PATCH_RECEPTIVE_FIELD)
        covers_c = (start <= px) & (px < start + nn.PATCH_RECEPTIVE_FIELD)
        np.testing.assert_array_equal(changed, np.outer(covers_r, covers_c))
