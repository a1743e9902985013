import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtgan import data
from mtgan.data import DatasetError, SceneSpec
from mtgan.evaluation import cityscapes_palette


def test_scene_is_deterministic():
    spec = SceneSpec(seed=3)
    a, b = data.generate_scene(spec, 7), data.generate_scene(spec, 7)
    assert a.equals(b)
    assert not a.equals(data.generate_scene(spec, 8))
    assert not a.equals(data.generate_scene(SceneSpec(seed=4), 7))


def test_scene_contents_are_consistent():
    p = cityscapes_palette()
    s = data.generate_scene(SceneSpec(seed=1, height=48, width=80), 0)
    assert s.rgb.shape == (48, 80, 3) and s.rgb.dtype == np.uint8
    assert s.dense_depth.dtype == np.uint16
    np.testing.assert_array_equal(s.semantic_rgb, p.colorize(s.semantic_ids))
    assert set(np.unique(s.semantic_ids)) <= set(p.class_ids)
    assert s.dense_depth.min() > 0


@pytest.mark.parametrize("seed", range(10))
def test_depth_steps_only_at_class_boundaries(seed):
    spec = SceneSpec(seed=seed)
    ground = {cityscapes_palette().id_of(n) for n in data.GROUND_CLASSES}
    for i in range(12):
        s = data.generate_scene(spec, i)
        d, ids = s.dense_depth.astype(np.int64), s.semantic_ids
        for axis in (0, 1):
            step = np.diff(d, axis=axis) != 0
            a = ids[:-1] if axis == 0 else ids[:, :-1]
            b = ids[1:] if axis == 0 else ids[:, 1:]
            inside = step & (a == b)
            assert np.all(np.isin(a[inside], list(ground))), (i, axis)


def test_rho_one_keeps_everything():
    s = data.generate_scene(SceneSpec(seed=2, rho=1.0), 0)
    np.testing.assert_array_equal(s.sparse_depth, s.dense_depth)


def test_sparse_rate_and_subset():
    dense = np.full((100, 100), 5000, dtype=np.uint16)
    p = data.sparsify_probabilities(100, 100, 0.05)
    assert abs(p.mean() - 0.05) < 1e-12
    sigma = np.sqrt(np.sum(p * (1 - p)))
    for seed in range(5):
        sparse = data.sparsify_depth(dense, 0.05, seed)
        assert abs(np.count_nonzero(sparse) - 500) <= 4 * sigma
        assert np.all((sparse == 0) | (sparse == dense))
    s = data.generate_scene(SceneSpec(seed=5), 0)
    kept = s.sparse_depth > 0
    np.testing.assert_array_equal(s.sparse_depth[kept], s.dense_depth[kept])


def test_rho_validation():
    for rho in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError, match=r"rho must be in \(0,1\]"):
            SceneSpec(rho=rho)
        with pytest.raises(ValueError):
            data.sparsify_depth(np.ones((4, 4), np.uint16), rho, 0)


def test_pnm_round_trip(tmp_path, rng):
    rgb = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    g8 = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    g16 = rng.integers(0, 65536, (5, 7)).astype(np.uint16)
    data.write_ppm(tmp_path / "a.ppm", rgb)
    data.write_pgm(tmp_path / "b.pgm", g8)
    data.write_pgm(tmp_path / "c.pgm", g16, bits=16)
    np.testing.assert_array_equal(data.read_ppm(tmp_path / "a.ppm"), rgb)
    np.testing.assert_array_equal(data.read_pgm(tmp_path / "b.pgm"), g8)
    out = data.read_pgm(tmp_path / "c.pgm")
    assert out.dtype == np.uint16
    np.testing.assert_array_equal(out, g16)
    # 16-bit samples are big-endian
    raw = (tmp_path / "c.pgm").read_bytes()
    assert raw[-2:] == int(g16[-1, -1]).to_bytes(2, "big")


def test_pnm_header_comments(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(data.read_pgm(tmp_path / "x.pgm"), [[1, 2]])


def test_pnm_errors_name_the_file(tmp_path):
    path = tmp_path / "t.ppm"
    data.write_ppm(path, np.zeros((4, 4, 3), np.uint8))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DatasetError, match=r"t\.ppm.*expected 48 data bytes, found 43"):
        data.read_ppm(path)
    with pytest.raises(DatasetError, match="bad magic"):
        data.read_pgm(path)
    with pytest.raises(DatasetError, match="missing file"):
        data.read_ppm(tmp_path / "nope.ppm")
    with pytest.raises(DatasetError, match="16-bit"):
        data.write_sample(tmp_path, data.Sample(
            "x", np.zeros((2, 2, 3), np.uint8), np.zeros((2, 2, 3), np.uint8),
            np.zeros((2, 2), np.uint8), np.full((2, 2), 70000, np.int64), np.zeros((2, 2), np.int64)))


def test_dataset_round_trip_and_manifest(tmp_path):
    spec = SceneSpec(seed=9, height=24, width=32, rho=0.2)
    m = data.generate_dataset(tmp_path, spec, 3, dmax_mm=30000)
    text = (tmp_path / "manifest.txt").read_text()
    assert "seed=9\n" in text and "rho=0.2\n" in text and f"spec_hash={spec.hash()}" in text
    loaded, samples = data.load_dataset(tmp_path)
    assert loaded == m
    for i, s in enumerate(samples):
        assert s.equals(data.generate_scene(spec, i))
    ds = data.ArrayDataset.load(tmp_path)
    assert len(ds) == 3 and ds.dmax_mm == 30000
    assert ds.rgb.shape == (3, 3, 24, 32) and ds.sparse.shape == (3, 1, 24, 32)


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetError, match="manifest.txt.*missing"):
        data.load_dataset(tmp_path)
    data.generate_dataset(tmp_path, SceneSpec(height=16, width=16), 2)
    (tmp_path / "00001_dense.pgm").unlink()
    with pytest.raises(DatasetError, match="00001_dense.pgm"):
        data.load_dataset(tmp_path)
    (tmp_path / "manifest.txt").write_text("seed=1\ncount=x\n")
    with pytest.raises(DatasetError, match="bad manifest"):
        data.load_dataset(tmp_path)


def test_byte_unit_conversion():
    img = np.array([[[0, 128, 255]]], dtype=np.uint8)
    x = data.bytes_to_unit(img)
    assert x.shape == (3, 1, 1) and x.dtype == np.float32
    assert x[0, 0, 0] == -1.0 and x[2, 0, 0] == 1.0
    allbytes = np.arange(256, dtype=np.uint8).reshape(16, 16, 1)
    np.testing.assert_array_equal(data.unit_to_bytes(data.bytes_to_unit(allbytes)), allbytes)
    np.testing.assert_array_equal(data.unit_to_bytes(np.array([[[-3.0]], [[3.0]], [[0.0]]])),
                                  [[[0, 255, 128]]])


def test_depth_unit_conversion():
    d = np.array([0, 10000, 20000], dtype=np.uint16)
    u = data.depth_to_unit(d, 20000)
    np.testing.assert_allclose(u, [-1, 0, 1])
    np.testing.assert_allclose(data.unit_to_depth(u, 20000), d)


def test_tensorize_masks():
    s = data.generate_scene(SceneSpec(seed=0, rho=0.3), 0)
    t = data.tensorize(s)
    np.testing.assert_array_equal(t.sparse_mask[0], (s.sparse_depth > 0).astype(np.float32))
    assert np.all(t.sparse[t.sparse_mask == 0] == -1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 100), st.integers(0, 3))
def test_unpaired_indices(n, bs, seed, stream):
    if bs > n:
        with pytest.raises(ValueError):
            data.unpaired_indices(n, bs, seed, stream, 0)
        return
    per_epoch = n // bs
    epoch = np.concatenate([data.unpaired_indices(n, bs, seed, stream, k)
                            for k in range(per_epoch)])
    assert len(epoch) == per_epoch * bs and len(set(epoch.tolist())) == len(epoch)
    again = data.unpaired_indices(n, bs, seed, stream, per_epoch - 1)
    np.testing.assert_array_equal(again, epoch[-bs:])


def test_streams_are_independent():
    a = data.unpaired_indices(64, 4, 0, 0, 0)
    b = data.unpaired_indices(64, 4, 0, 1, 0)
    assert not np.array_equal(a, b)


def test_illumination_changes_rgb_only():
    plain = SceneSpec(seed=4, gain=(1.0, 1.0), bias=(0.0, 0.0), tint=0.0, noise=0.0, shading=0.0)
    lit = SceneSpec(seed=4)
    a, b = data.generate_scene(plain, 2), data.generate_scene(lit, 2)
    np.testing.assert_array_equal(a.semantic_ids, b.semantic_ids)
    np.testing.assert_array_equal(a.dense_depth, b.dense_depth)
    assert not np.array_equal(a.rgb, b.rgb)
    # with every jitter off, rgb is the class color itself
    np.testing.assert_array_equal(a.rgb, a.semantic_rgb)
