"""Synthetic street scenes and the on-disk dataset format.

A scene is a layered drawing: sky, a building band at constant depth, a
ground plane (road and sidewalk) whose depth grows toward the horizon, and
upright objects (cars, people, poles, trees) standing on the ground at the
ground depth of their base row. RGB is the class color under a random
illumination (gain, bias, tint, shading) plus pixel noise, so it varies
between images while labels and depth do not.

Files per sample: ``<id>_rgb.ppm``, ``<id>_sem.ppm`` (P6), ``<id>_semid.pgm``
(8-bit P5) and ``<id>_dense.pgm`` / ``<id>_sparse.pgm`` (16-bit big-endian P5,
millimetres, 0 = no measurement). ``manifest.txt`` holds key=value lines.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import Palette, cityscapes_palette

MAX_DEPTH_MM = 65535
DEFAULT_DMAX_MM = 20000.0


class DatasetError(IOError):
    """A dataset file is missing, malformed or inconsistent."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


@dataclass
class Sample:
    id: str
    rgb: np.ndarray           # H x W x 3 uint8
    semantic_rgb: np.ndarray  # H x W x 3 uint8, palette colors only
    semantic_ids: np.ndarray  # H x W uint8
    dense_depth: np.ndarray   # H x W uint16, mm
    sparse_depth: np.ndarray  # H x W uint16, mm, 0 = missing

    def equals(self, other: "Sample") -> bool:
        return self.id == other.id and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("rgb", "semantic_rgb", "semantic_ids", "dense_depth", "sparse_depth"))


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    objects: tuple = (2, 5)
    d_min: float = 2000.0
    d_max: float = 18000.0
    rho: float = 0.05
    gain: tuple = (0.6, 1.2)
    bias: tuple = (-30.0, 30.0)
    tint: float = 12.0
    noise: float = 6.0
    shading: float = 0.15

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.d_max > MAX_DEPTH_MM:
            raise ValueError(f"d_max {self.d_max} exceeds 16-bit range")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must be in (0,1]")
        if self.height < 16 or self.width < 16:
            raise ValueError("scenes need at least 16x16 pixels")

    def hash(self) -> str:
        text = repr(sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


GROUND_CLASSES = ("road", "sidewalk")


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, stream]))


def _render_geometry(spec: SceneSpec, rng: np.random.Generator, palette: Palette):
    h, w = spec.height, spec.width
    ids = np.zeros((h, w), dtype=np.uint8)
    depth = np.zeros((h, w), dtype=np.float64)
    cls = palette.id_of

    horizon = int(rng.integers(int(0.35 * h), int(0.5 * h) + 1))
    d_far = rng.uniform(0.75, 0.9) * spec.d_max

    # sky and a building band with a blocky skyline, all at the far depth
    ids[:horizon] = cls("sky")
    depth[:horizon] = spec.d_max
    col = 0
    while col < w:
        width = int(rng.integers(max(3, w // 10), max(4, w // 4) + 1))
        top = int(rng.integers(max(1, horizon // 6), max(2, (2 * horizon) // 3) + 1))
        ids[top:horizon, col:col + width] = cls("building")
        depth[top:horizon, col:col + width] = d_far
        col += width

    # ground plane: depth falls from d_far at the horizon to d_min at the bottom row
    rows = np.arange(horizon, h)
    t = (rows - horizon) / max(1, h - 1 - horizon)
    inv = (1 - t) / d_far + t / spec.d_min
    ground_depth = 1.0 / inv
    depth[horizon:] = ground_depth[:, None]
    ids[horizon:] = cls("road")
    centre = w / 2 + rng.uniform(-0.15, 0.15) * w
    spread = rng.uniform(0.2, 0.45)
    for r in rows:
        half = (0.04 + spread * (r - horizon) / max(1, h - horizon)) * w
        ids[r, :max(0, int(centre - half))] = cls("sidewalk")
        ids[r, min(w, int(centre + half)):] = cls("sidewalk")

    # upright objects, drawn far to near so nearer ones occlude
    kinds = ("car", "person", "pole", "vegetation")
    n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    placed = []
    for _ in range(n_obj):
        kind = kinds[int(rng.integers(len(kinds)))]
        base = int(rng.integers(horizon + 2, h))
        d_obj = ground_depth[base - horizon]
        scale = d_far / d_obj  # apparent size grows as objects come closer
        if kind == "car":
            ow, oh = 0.10 * w * scale ** 0.5, 0.06 * h * scale ** 0.5
        elif kind == "person":
            ow, oh = 0.03 * w * scale ** 0.5, 0.10 * h * scale ** 0.5
        elif kind == "pole":
            ow, oh = 1.0 + 0.005 * w * scale ** 0.5, 0.25 * h * scale ** 0.5
        else:
            ow, oh = 0.10 * w * scale ** 0.5, 0.14 * h * scale ** 0.5
        ow, oh = max(2, int(round(ow))), max(3, int(round(oh)))
        left = int(rng.integers(0, max(1, w - ow)))
        box = (max(0, base - oh), base + 1, left, min(w, left + ow))
        # same-class overlap would create a depth step inside one class
        if any(k == kind and _overlap(box, b) for k, _, b in placed):
            continue
        placed.append((kind, d_obj, box))

    for kind, d_obj, (r0, r1, c0, c1) in sorted(placed, key=lambda p: -p[1]):
        if kind == "vegetation":
            rr, cc = np.mgrid[r0:r1, c0:c1]
            cy, cx = (r0 + r1 - 1) / 2, (c0 + c1 - 1) / 2
            ry, rx = max(1.0, (r1 - r0) / 2), max(1.0, (c1 - c0) / 2)
            mask = ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0
        else:
            mask = np.ones((r1 - r0, c1 - c0), dtype=bool)
        ids[r0:r1, c0:c1][mask] = cls(kind)
        depth[r0:r1, c0:c1][mask] = d_obj

    return ids, np.round(depth).astype(np.uint16)


def _overlap(a, b) -> bool:
    # touching boxes count too: a shared edge is still a step inside one class
    return a[0] <= b[1] and b[0] <= a[1] and a[2] <= b[3] and b[2] <= a[3]


def _render_rgb(spec: SceneSpec, ids: np.ndarray, palette: Palette,
                rng: np.random.Generator) -> np.ndarray:
    h, w = ids.shape
    base = palette.colors[ids].astype(np.float64)
    gain = rng.uniform(*spec.gain)
    bias = rng.uniform(*spec.bias)
    tint = rng.normal(0.0, spec.tint, size=3) if spec.tint else np.zeros(3)
    direction = rng.uniform(-1, 1, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    shade = 1.0 + spec.shading * (direction[0] * (yy / h - 0.5) + direction[1] * (xx / w - 0.5))
    img = base * gain * shade[..., None] + bias + tint
    if spec.noise:
        img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def sparsify_depth(dense: np.ndarray, rho: float, seed) -> np.ndarray:
    """Keep each nonzero pixel with probability rho on a scanline-like row pattern.

    Every 4th row keeps with probability min(1, 2.5 rho), the others with the
    complement that makes the average rate exactly rho.
    """
    if not 0 < rho <= 1:
        raise ValueError("rho must be in (0,1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(dense.shape) < sparsify_probabilities(*dense.shape, rho)
    return np.where(keep & (dense > 0), dense, 0).astype(dense.dtype)


def sparsify_probabilities(height: int, width: int, rho: float) -> np.ndarray:
    """Per-pixel keep probability used by :func:`sparsify_depth`."""
    p_scan = min(1.0, 2.5 * rho)
    p_rest = (4 * rho - p_scan) / 3
    return np.broadcast_to(
        np.where(np.arange(height) % 4 == 0, p_scan, p_rest)[:, None], (height, width))


def sample_id(index: int) -> str:
    return f"{index:05d}"


def generate_scene(spec: SceneSpec, index: int, palette: Palette | None = None) -> Sample:
    """Deterministic in (spec, index); lighting draws come from their own stream."""
    palette = palette or cityscapes_palette()
    ids, dense = _render_geometry(spec, _rng(spec.seed, index, 0), palette)
    rgb = _render_rgb(spec, ids, palette, _rng(spec.seed, index, 1))
    sparse = sparsify_depth(dense, spec.rho, _rng(spec.seed, index, 2))
    return Sample(sample_id(index), rgb, palette.colorize(ids), ids, dense, sparse)


# -- PNM containers -------------------------------------------------------------------

def _write_pnm(path: Path, magic: bytes, arr: np.ndarray, maxval: int) -> None:
    h, w = arr.shape[:2]
    header = magic + b"\n%d %d\n%d\n" % (w, h, maxval)
    if maxval > 255:
        payload = arr.astype(">u2").tobytes()
    else:
        payload = arr.astype(np.uint8).tobytes()
    path.write_bytes(header + payload)


def _read_pnm(path: Path, magic: bytes) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(path, "missing file") from None
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(path, "truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != magic:
        raise DatasetError(path, f"bad magic {tokens[0]!r}, expected {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(path, "malformed header") from None
    channels = 3 if magic == b"P6" else 1
    itemsize = 2 if maxval > 255 else 1
    expected = w * h * channels * itemsize
    payload = raw[pos:]
    if len(payload) != expected:
        raise DatasetError(path, f"expected {expected} data bytes, found {len(payload)}")
    dtype = ">u2" if itemsize == 2 else np.uint8
    arr = np.frombuffer(payload, dtype=dtype).reshape((h, w, channels) if channels == 3 else (h, w))
    return arr.astype(np.uint16 if itemsize == 2 else np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    _write_pnm(Path(path), b"P6", np.asarray(rgb, dtype=np.uint8), 255)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P6")


def write_pgm(path, img: np.ndarray, bits: int = 8) -> None:
    img = np.asarray(img)
    limit = 255 if bits == 8 else MAX_DEPTH_MM
    if img.size and (img.min() < 0 or img.max() > limit):
        raise DatasetError(path, f"values outside [0, {limit}] for a {bits}-bit PGM")
    _write_pnm(Path(path), b"P5", img, 255 if bits == 8 else 65535)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P5")


SUFFIXES = {"rgb": "_rgb.ppm", "semantic_rgb": "_sem.ppm", "semantic_ids": "_semid.pgm",
            "dense_depth": "_dense.pgm", "sparse_depth": "_sparse.pgm"}


def write_sample(directory, sample: Sample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("dense_depth", "sparse_depth"):
        arr = np.asarray(getattr(sample, name))
        if arr.size and arr.max() > MAX_DEPTH_MM:
            raise DatasetError(d / f"{sample.id}{SUFFIXES[name]}",
                               f"depth {arr.max()} mm exceeds the 16-bit maximum {MAX_DEPTH_MM}")
    write_ppm(d / f"{sample.id}_rgb.ppm", sample.rgb)
    write_ppm(d / f"{sample.id}_sem.ppm", sample.semantic_rgb)
    write_pgm(d / f"{sample.id}_semid.pgm", sample.semantic_ids, bits=8)
    write_pgm(d / f"{sample.id}_dense.pgm", sample.dense_depth, bits=16)
    write_pgm(d / f"{sample.id}_sparse.pgm", sample.sparse_depth, bits=16)


def load_sample(directory, sid: str) -> Sample:
    d = Path(directory)
    s = Sample(
        sid,
        read_ppm(d / f"{sid}_rgb.ppm"),
        read_ppm(d / f"{sid}_sem.ppm"),
        read_pgm(d / f"{sid}_semid.pgm"),
        read_pgm(d / f"{sid}_dense.pgm").astype(np.uint16),
        read_pgm(d / f"{sid}_sparse.pgm").astype(np.uint16),
    )
    shape = s.rgb.shape[:2]
    for name in ("semantic_rgb", "semantic_ids", "dense_depth", "sparse_depth"):
        if getattr(s, name).shape[:2] != shape:
            raise DatasetError(d / f"{sid}{SUFFIXES[name]}",
                               f"size {getattr(s, name).shape[:2]} != rgb size {shape}")
    return s


# -- manifest and whole datasets --------------------------------------------------------

@dataclass
class Manifest:
    seed: int
    count: int
    width: int
    height: int
    rho: float
    dmax_mm: float
    spec_hash: str

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DatasetError(path, "missing file")
        values = {}
        for line in path.read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
        try:
            return cls(int(values["seed"]), int(values["count"]), int(values["width"]),
                       int(values["height"]), float(values["rho"]), float(values["dmax_mm"]),
                       values["spec_hash"])
        except (KeyError, ValueError) as exc:
            raise DatasetError(path, f"bad manifest: {exc}") from None


def generate_dataset(out_dir, spec: SceneSpec, count: int,
                     dmax_mm: float = DEFAULT_DMAX_MM) -> Manifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    palette = cityscapes_palette()
    for i in range(count):
        write_sample(out, generate_scene(spec, i, palette))
    manifest = Manifest(spec.seed, count, spec.width, spec.height, spec.rho, dmax_mm, spec.hash())
    (out / "manifest.txt").write_text(manifest.dumps())
    return manifest


def load_dataset(directory) -> tuple[Manifest, list]:
    d = Path(directory)
    manifest = Manifest.load(d / "manifest.txt")
    return manifest, [load_sample(d, sample_id(i)) for i in range(manifest.count)]


# -- tensors for training ---------------------------------------------------------------

def bytes_to_unit(img: np.ndarray) -> np.ndarray:
    """uint8 H x W x C -> float32 C x H x W in [-1, 1]."""
    return (np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def unit_to_bytes(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`bytes_to_unit`, rounding to the nearest byte."""
    return np.clip(np.round((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255) \
        .astype(np.uint8).transpose(1, 2, 0)


def depth_to_unit(depth_mm: np.ndarray, dmax_mm: float) -> np.ndarray:
    return (np.asarray(depth_mm, dtype=np.float32) / np.float32(dmax_mm) * 2 - 1).astype(np.float32)


def unit_to_depth(x: np.ndarray, dmax_mm: float) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0 * dmax_mm


@dataclass
class SampleTensors:
    rgb: np.ndarray          # 3 x H x W
    semantic: np.ndarray     # 3 x H x W
    sparse: np.ndarray       # 1 x H x W, normalized (missing pixels hold -1)
    sparse_mask: np.ndarray  # 1 x H x W, 1 where measured
    dense: np.ndarray        # 1 x H x W, normalized
    dense_mask: np.ndarray   # 1 x H x W


def tensorize(sample: Sample, dmax_mm: float = DEFAULT_DMAX_MM) -> SampleTensors:
    sparse_mask = (sample.sparse_depth > 0)[None].astype(np.float32)
    dense_mask = (sample.dense_depth > 0)[None].astype(np.float32)
    return SampleTensors(
        rgb=bytes_to_unit(sample.rgb),
        semantic=bytes_to_unit(sample.semantic_rgb),
        sparse=depth_to_unit(sample.sparse_depth, dmax_mm)[None],
        sparse_mask=sparse_mask,
        dense=depth_to_unit(sample.dense_depth, dmax_mm)[None],
        dense_mask=dense_mask,
    )


@dataclass
class ArrayDataset:
    """All samples of a split stacked as N x C x H x W float32 arrays."""
    rgb: np.ndarray
    semantic: np.ndarray
    sparse: np.ndarray
    sparse_mask: np.ndarray
    dense: np.ndarray
    dense_mask: np.ndarray
    semantic_ids: np.ndarray
    dense_mm: np.ndarray
    dmax_mm: float
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.rgb.shape[0]

    @classmethod
    def from_samples(cls, samples, dmax_mm: float = DEFAULT_DMAX_MM) -> "ArrayDataset":
        ts = [tensorize(s, dmax_mm) for s in samples]

        def stack(name):
            return np.stack([getattr(t, name) for t in ts]).astype(np.float32)

        return cls(stack("rgb"), stack("semantic"), stack("sparse"), stack("sparse_mask"),
                   stack("dense"), stack("dense_mask"),
                   np.stack([s.semantic_ids for s in samples]),
                   np.stack([s.dense_depth for s in samples]), float(dmax_mm),
                   [s.id for s in samples])

    @classmethod
    def load(cls, directory) -> "ArrayDataset":
        manifest, samples = load_dataset(directory)
        return cls.from_samples(samples, manifest.dmax_mm)


def unpaired_indices(n: int, batch_size: int, seed: int, stream: int, step: int) -> np.ndarray:
    """Sample indices for ``step`` of one independently shuffled stream.

    Each epoch is a fresh permutation drawn from (seed, stream, epoch); the
    trailing partial batch is dropped. Being a pure function of the step, it
    lets a resumed run see exactly the batches an uninterrupted one would.
    """
    if not 0 < batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    per_epoch = n // batch_size
    epoch, k = divmod(step, per_epoch)
    order = np.random.default_rng([seed, stream, epoch]).permutation(n)
    return order[k * batch_size:(k + 1) * batch_size]
