"""Alternating optimization of the semantic and depth branches.

One outer step = one semantic update (G_s, F_s then D_X1, D_Y1) followed by
one depth update (G_d, F_d then D_X2, D_Y2) that reads the just-updated G_s.
The generated semantic image is detached before it enters the depth branch
unless ``joint_backprop`` is set.

All randomness is a pure function of (seed, branch, step), so a run resumed
from a checkpoint reproduces the uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn, ops
from .losses import (LossWeights, cycle_loss, depth_loss, depth_objective, gan_loss_d,
                     gan_loss_g, rec_loss, semantic_objective, smoothness_loss)
from .tensor import Tensor

log = logging.getLogger(__name__)

SEMANTIC_KEYS = ("gan_G", "gan_F", "cyc", "rec", "d_X1", "d_Y1")
DEPTH_KEYS = ("gan_G", "gan_F", "cyc", "rec", "depth", "smooth", "d_X2", "d_Y2")
ROLES = ("G_s", "F_s", "D_X1", "D_Y1", "G_d", "F_d", "D_X2", "D_Y2")


class NonFiniteLossError(RuntimeError):
    def __init__(self, branch: str, losses: dict):
        bad = {k: v for k, v in losses.items() if not np.isfinite(v)}
        super().__init__(f"{branch} step aborted: non-finite losses {bad}")
        self.losses = losses


# -- optimizer --------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    base_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_constant: int = 100
    epochs_decay: int = 100
    batch_size: int = 1

    @property
    def total_epochs(self) -> int:
        return self.epochs_constant + self.epochs_decay


def lr_schedule(epoch: float, cfg: OptimizerConfig = OptimizerConfig()) -> float:
    """Constant for ``epochs_constant`` epochs, then linear to 0."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.epochs_constant:
        return cfg.base_lr
    if epoch >= cfg.total_epochs or cfg.epochs_decay == 0:
        return 0.0
    return cfg.base_lr * (1.0 - (epoch - cfg.epochs_constant) / cfg.epochs_decay)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: nn.ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: nn.ModelParams, state: AdamState, lr: float,
              cfg: OptimizerConfig = OptimizerConfig()) -> list:
    """In-place Adam update with bias correction; returns names whose step was skipped."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    skipped = []
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            log.warning("adam_step: non-finite gradient for %s/%s, skipped", params.tag, name)
            skipped.append(name)
            continue
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)
    return skipped


class ReplayBuffer:
    """History of generated images shown to a discriminator.

    While filling, every fake is stored and returned. Once full, each fake is
    returned as-is with probability 1/2, otherwise swapped for a random stored
    one which it replaces.
    """

    def __init__(self, capacity: int = 50):
        self.capacity = capacity
        self.images: list = []

    def query(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.capacity == 0:
            return images
        out = []
        for img in images:
            if len(self.images) < self.capacity:
                self.images.append(img.copy())
                out.append(img)
            elif rng.random() < 0.5:
                j = int(rng.integers(self.capacity))
                out.append(self.images[j].copy())
                self.images[j] = img.copy()
            else:
                out.append(img)
        return np.stack(out)

    def snapshot(self) -> list:
        return list(self.images)

    def restore(self, images: list) -> None:
        self.images = list(images)


# -- branches -----------------------------------------------------------------------

@dataclass
class SemanticOptions:
    use_mssp: bool = True
    use_rec: bool = True
    gan_variant: str = "log"
    mssp_kernels: tuple = nn.DEFAULT_MSSP_KERNELS


@dataclass
class DepthOptions:
    use_semantic_input: bool = True
    use_depth_loss: bool = True
    use_smoothness: bool = True
    smoothness_guide: str = "semantic"
    gan_variant: str = "log"
    joint_backprop: bool = False

    def __post_init__(self):
        if self.smoothness_guide not in ("semantic", "rgb"):
            raise ValueError("smoothness_guide must be 'semantic' or 'rgb'")


def _role_seed(seed: int, role: str) -> int:
    return int(np.random.SeedSequence([seed, ROLES.index(role)]).generate_state(1)[0])


def _models_with_opt(models: dict) -> dict:
    return {role: AdamState.zeros_like(p) for role, p in models.items()}


@dataclass
class SemanticBranch:
    G: nn.ModelParams
    F: nn.ModelParams
    DX: nn.ModelParams
    DY: nn.ModelParams
    options: SemanticOptions
    opt: dict = field(default_factory=dict)
    pool_x: ReplayBuffer = field(default_factory=ReplayBuffer)
    pool_y: ReplayBuffer = field(default_factory=ReplayBuffer)

    @classmethod
    def create(cls, seed: int, base_width: int, image_size, options: SemanticOptions = None,
               buffer_size: int = 50) -> "SemanticBranch":
        options = options or SemanticOptions()
        kw = dict(base_width=base_width, image_size=image_size, use_mssp=options.use_mssp,
                  mssp_kernels=options.mssp_kernels)
        b = cls(nn.build(nn.semantic_config(**kw), _role_seed(seed, "G_s")),
                nn.build(nn.semantic_config(inverse=True, **kw), _role_seed(seed, "F_s")),
                nn.build(nn.disc_config(3, base_width, image_size), _role_seed(seed, "D_X1")),
                nn.build(nn.disc_config(3, base_width, image_size), _role_seed(seed, "D_Y1")),
                options, pool_x=ReplayBuffer(buffer_size), pool_y=ReplayBuffer(buffer_size))
        b.opt = _models_with_opt(b.models())
        return b

    def models(self) -> dict:
        return {"G_s": self.G, "F_s": self.F, "D_X1": self.DX, "D_Y1": self.DY}

    def buffers(self) -> dict:
        return {"D_X1": self.pool_x, "D_Y1": self.pool_y}


@dataclass
class DepthBranch:
    G: nn.ModelParams
    F: nn.ModelParams
    DX: nn.ModelParams
    DY: nn.ModelParams
    options: DepthOptions
    opt: dict = field(default_factory=dict)
    pool_x: ReplayBuffer = field(default_factory=ReplayBuffer)
    pool_y: ReplayBuffer = field(default_factory=ReplayBuffer)

    @classmethod
    def create(cls, seed: int, base_width: int, image_size, options: DepthOptions = None,
               buffer_size: int = 50) -> "DepthBranch":
        options = options or DepthOptions()
        b = cls(nn.build(nn.depth_config(base_width, image_size), _role_seed(seed, "G_d")),
                nn.build(nn.depth_config(base_width, image_size, inverse=True),
                         _role_seed(seed, "F_d")),
                nn.build(nn.disc_config(1, base_width, image_size), _role_seed(seed, "D_X2")),
                nn.build(nn.disc_config(1, base_width, image_size), _role_seed(seed, "D_Y2")),
                options, pool_x=ReplayBuffer(buffer_size), pool_y=ReplayBuffer(buffer_size))
        b.opt = _models_with_opt(b.models())
        return b

    def models(self) -> dict:
        return {"G_d": self.G, "F_d": self.F, "D_X2": self.DX, "D_Y2": self.DY}

    def buffers(self) -> dict:
        return {"D_X2": self.pool_x, "D_Y2": self.pool_y}


@dataclass
class SemanticBatch:
    x: np.ndarray   # N x 3 x H x W RGB in [-1, 1]
    y: np.ndarray   # N x 3 x H x W semantic colors in [-1, 1], unpaired with x


@dataclass
class DepthBatch:
    rgb: np.ndarray          # N x 3 x H x W
    sparse: np.ndarray       # N x 1 x H x W normalized, missing = -1
    sparse_mask: np.ndarray  # N x 1 x H x W
    dense: np.ndarray        # N x 1 x H x W normalized, unpaired with rgb/sparse


def _finite_or_raise(branch: str, values: dict) -> None:
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(branch, values)


def _zero_grads(*models: nn.ModelParams) -> None:
    for m in models:
        m.zero_grad()


def semantic_update(b: SemanticBranch, batch: SemanticBatch, weights: LossWeights, lr: float,
                    rng: np.random.Generator, cfg: OptimizerConfig = OptimizerConfig()) -> dict:
    """One generator update then one discriminator update; returns the loss breakdown."""
    variant = b.options.gan_variant
    x, y = Tensor(batch.x), Tensor(batch.y)
    _zero_grads(b.G, b.F, b.DX, b.DY)

    fake_y = nn.generator_forward(x, b.G)
    rec_x = nn.generator_forward(fake_y, b.F)
    fake_x = nn.generator_forward(y, b.F)
    rec_y = nn.generator_forward(fake_x, b.G)

    dx_frozen, dy_frozen = b.DX.frozen(), b.DY.frozen()
    gan_g = gan_loss_g(nn.patchgan_forward(fake_y, dy_frozen), variant)
    gan_f = gan_loss_g(nn.patchgan_forward(fake_x, dx_frozen), variant)
    cyc = cycle_loss(x, rec_x, y, rec_y)
    if b.options.use_rec:
        rec = rec_loss(x, rec_x, y, rec_y)
        rec_w = weights
    else:
        rec = rec_loss(x, rec_x.detach(), y, rec_y.detach())
        rec_w = LossWeights(weights.cyc_semantic, 0.0, weights.cyc_depth, weights.rec_depth,
                            weights.depth, weights.smooth)
    total = semantic_objective(gan_g, gan_f, cyc, rec, rec_w) if b.options.use_rec else \
        semantic_objective(gan_g, gan_f, cyc, 0.0, rec_w)

    snap = (b.pool_x.snapshot(), b.pool_y.snapshot())
    pool_y = b.pool_y.query(fake_y.data, rng)
    pool_x = b.pool_x.query(fake_x.data, rng)
    d_y = gan_loss_d(nn.patchgan_forward(y, b.DY), nn.patchgan_forward(Tensor(pool_y), b.DY),
                     variant)
    d_x = gan_loss_d(nn.patchgan_forward(x, b.DX), nn.patchgan_forward(Tensor(pool_x), b.DX),
                     variant)
    losses = {"gan_G": gan_g.item(), "gan_F": gan_f.item(), "cyc": cyc.item(),
              "rec": rec.item(), "d_X1": d_x.item(), "d_Y1": d_y.item()}
    try:
        _finite_or_raise("semantic", losses | {"total": total.item()})
    except NonFiniteLossError:
        b.pool_x.restore(snap[0])
        b.pool_y.restore(snap[1])
        raise

    total.backward()
    adam_step(b.G, b.opt["G_s"], lr, cfg)
    adam_step(b.F, b.opt["F_s"], lr, cfg)
    ops.add(d_x, d_y).backward()
    adam_step(b.DX, b.opt["D_X1"], lr, cfg)
    adam_step(b.DY, b.opt["D_Y1"], lr, cfg)
    return losses


def semantic_guidance(G_s: nn.ModelParams, rgb: np.ndarray) -> np.ndarray:
    """G_s(rgb) with no graph, as fed to the depth branch."""
    return nn.generator_forward(Tensor(rgb), G_s.frozen()).data


def depth_update(b: DepthBranch, batch: DepthBatch, G_s: nn.ModelParams, weights: LossWeights,
                 lr: float, rng: np.random.Generator, cfg: OptimizerConfig = OptimizerConfig(),
                 semantic_opt: AdamState | None = None) -> dict:
    opts = b.options
    variant = opts.gan_variant
    x_i, x_d, y_d = Tensor(batch.rgb), Tensor(batch.sparse), Tensor(batch.dense)
    _zero_grads(b.G, b.F, b.DX, b.DY)

    joint = opts.joint_backprop and opts.use_semantic_input
    if not opts.use_semantic_input:
        sem = Tensor(np.zeros_like(batch.rgb))
    elif joint:
        G_s.zero_grad()
        sem = nn.generator_forward(x_i, G_s)
    else:
        sem = Tensor(semantic_guidance(G_s, batch.rgb))

    fake_yd = nn.generator_forward(ops.concat_channels([x_d, x_i, sem]), b.G)
    rec_xd = nn.generator_forward(ops.concat_channels([fake_yd, x_i, sem]), b.F)
    fake_xd = nn.generator_forward(ops.concat_channels([y_d, x_i, sem]), b.F)
    rec_yd = nn.generator_forward(ops.concat_channels([fake_xd, x_i, sem]), b.G)

    dx_frozen, dy_frozen = b.DX.frozen(), b.DY.frozen()
    gan_g = gan_loss_g(nn.patchgan_forward(fake_yd, dy_frozen), variant)
    gan_f = gan_loss_g(nn.patchgan_forward(fake_xd, dx_frozen), variant)
    cyc = cycle_loss(x_d, rec_xd, y_d, rec_yd)
    rec = rec_loss(x_d, rec_xd, y_d, rec_yd)
    with np.errstate(all="ignore"):
        l_d = depth_loss(fake_yd, x_d, batch.sparse_mask > 0)
    guide = x_i if opts.smoothness_guide == "rgb" else sem
    l_s = smoothness_loss(fake_yd, guide)
    total = depth_objective(gan_g, gan_f, cyc, rec,
                            l_d if opts.use_depth_loss else 0.0,
                            l_s if opts.use_smoothness else 0.0, weights)

    snap = (b.pool_x.snapshot(), b.pool_y.snapshot())
    pool_y = b.pool_y.query(fake_yd.data, rng)
    pool_x = b.pool_x.query(fake_xd.data, rng)
    d_y = gan_loss_d(nn.patchgan_forward(y_d, b.DY), nn.patchgan_forward(Tensor(pool_y), b.DY),
                     variant)
    d_x = gan_loss_d(nn.patchgan_forward(x_d, b.DX), nn.patchgan_forward(Tensor(pool_x), b.DX),
                     variant)
    losses = {"gan_G": gan_g.item(), "gan_F": gan_f.item(), "cyc": cyc.item(),
              "rec": rec.item(), "depth": l_d.item(), "smooth": l_s.item(),
              "d_X2": d_x.item(), "d_Y2": d_y.item()}
    try:
        _finite_or_raise("depth", losses | {"total": total.item()})
    except NonFiniteLossError:
        b.pool_x.restore(snap[0])
        b.pool_y.restore(snap[1])
        raise

    total.backward()
    adam_step(b.G, b.opt["G_d"], lr, cfg)
    adam_step(b.F, b.opt["F_d"], lr, cfg)
    if joint:
        if semantic_opt is None:
            raise ValueError("joint_backprop needs the semantic optimizer state")
        adam_step(G_s, semantic_opt, lr, cfg)
    ops.add(d_x, d_y).backward()
    adam_step(b.DX, b.opt["D_X2"], lr, cfg)
    adam_step(b.DY, b.opt["D_Y2"], lr, cfg)
    return losses


# -- trainer state ------------------------------------------------------------------

@dataclass
class TrainerState:
    semantic: SemanticBranch
    depth: DepthBranch
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    epoch: int = 0
    step: int = 0
    config: dict = field(default_factory=dict)

    @classmethod
    def create(cls, seed: int = 0, base_width: int = 16, image_size=(64, 64),
               semantic: SemanticOptions = None, depth: DepthOptions = None,
               weights: LossWeights = None, optim: OptimizerConfig = None,
               buffer_size: int = 50) -> "TrainerState":
        return cls(SemanticBranch.create(seed, base_width, image_size, semantic, buffer_size),
                   DepthBranch.create(seed, base_width, image_size, depth, buffer_size),
                   weights or LossWeights(), optim or OptimizerConfig(), seed)

    def models(self) -> dict:
        return self.semantic.models() | self.depth.models()

    def optimizers(self) -> dict:
        return self.semantic.opt | self.depth.opt

    def buffers(self) -> dict:
        return self.semantic.buffers() | self.depth.buffers()

    def lr(self) -> float:
        return lr_schedule(self.epoch, self.optim)


def snapshot_branch(b) -> tuple:
    """Copies of everything an update mutates: parameters, Adam state, replay buffers."""
    params = {role: {k: p.data.copy() for k, p in m.items()} for role, m in b.models().items()}
    moments = {role: ({k: a.copy() for k, a in o.m.items()},
                      {k: a.copy() for k, a in o.v.items()}, o.t) for role, o in b.opt.items()}
    return params, moments, (b.pool_x.snapshot(), b.pool_y.snapshot())


def restore_branch(b, snap: tuple) -> None:
    params, moments, (px, py) = snap
    for role, m in b.models().items():
        for k, p in m.items():
            p.data[...] = params[role][k]
            p.grad = None
    for role, (m, v, t) in moments.items():
        b.opt[role].m, b.opt[role].v, b.opt[role].t = m, v, t
    b.pool_x.restore(px)
    b.pool_y.restore(py)


def step_rng(seed: int, branch: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, branch, step]))


def train_step_semantic(state: TrainerState, batch: SemanticBatch) -> dict:
    return semantic_update(state.semantic, batch, state.weights, state.lr(),
                           step_rng(state.seed, 1, state.step), state.optim)


def train_step_depth(state: TrainerState, batch: DepthBatch) -> dict:
    return depth_update(state.depth, batch, state.semantic.G, state.weights, state.lr(),
                        step_rng(state.seed, 2, state.step), state.optim,
                        semantic_opt=state.semantic.opt["G_s"])


# -- checkpoints --------------------------------------------------------------------
#
# little-endian: b"MTGN" | u32 version | u32 count | tensors... | u32 count | moments...
# | u32 epoch | u64 step | u64 seed, then an optional b"BUFS" block holding the
# replay buffers in the same tensor layout.

CHECKPOINT_MAGIC = b"MTGN"
CHECKPOINT_VERSION = 1
BUFFER_MAGIC = b"BUFS"


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _pack_tensors(items: list) -> bytes:
    out = [struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensors(self) -> list:
        (count,) = self.unpack("<I", "tensor count")
        items = []
        for _ in range(count):
            (n,) = self.unpack("<H", "name length")
            name = self.take(n, "name").decode("utf-8")
            (rank,) = self.unpack("<B", f"rank of {name}")
            dims = self.unpack(f"<{rank}I", f"dims of {name}")
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(self.take(4 * size, f"data of {name}"), dtype="<f4")
            items.append((name, data.reshape(dims).astype(np.float32)))
        return items


def state_tensors(state: TrainerState) -> list:
    return [(f"{role}/{name}", p.data) for role, m in state.models().items()
            for name, p in m.items()]


def moment_tensors(state: TrainerState) -> list:
    items = []
    for role, opt in state.optimizers().items():
        for name in state.models()[role]:
            items.append((f"{role}/{name}/m", opt.m[name]))
            items.append((f"{role}/{name}/v", opt.v[name]))
    return items


def buffer_tensors(state: TrainerState) -> list:
    return [(f"{role}/{i}", img) for role, buf in state.buffers().items()
            for i, img in enumerate(buf.images)]


def save_checkpoint(state: TrainerState, path) -> None:
    payload = b"".join([
        CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
        _pack_tensors(state_tensors(state)),
        _pack_tensors(moment_tensors(state)),
        struct.pack("<IQQ", state.epoch, state.step, state.seed),
        BUFFER_MAGIC, _pack_tensors(buffer_tensors(state)),
    ])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


@dataclass
class Checkpoint:
    params: dict
    moments: dict
    epoch: int
    step: int
    seed: int
    buffers: dict


def read_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"magic mismatch: {magic!r} != {CHECKPOINT_MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    params = dict(r.tensors())
    moments = dict(r.tensors())
    epoch, step, seed = r.unpack("<IQQ", "counters")
    buffers: dict = {}
    if r.pos < len(r.raw):
        at = r.pos
        if r.take(4, "buffer block magic") != BUFFER_MAGIC:
            raise CheckpointError("unexpected trailing bytes", at)
        for name, img in r.tensors():
            role, _, _ = name.rpartition("/")
            buffers.setdefault(role, []).append(img)
        if r.pos != len(r.raw):
            raise CheckpointError("unexpected trailing bytes", r.pos)
    return Checkpoint(params, moments, epoch, step, seed, buffers)


def load_checkpoint(path, state: TrainerState) -> TrainerState:
    """Fill ``state`` (built with the matching architecture) from a checkpoint file."""
    ck = read_checkpoint(path)
    models = state.models()
    expected = {f"{role}/{name}": p.shape for role, m in models.items() for name, p in m.items()}
    got = {k: v.shape for k, v in ck.params.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))[:3]
        extra = sorted(set(got) - set(expected))[:3]
        wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])[:3]
        raise ArchitectureMismatch(
            f"checkpoint does not match architecture: missing {missing}, extra {extra}, "
            f"shape mismatch {wrong}")
    for role, m in models.items():
        opt = state.optimizers()[role]
        for name, p in m.items():
            p.data[...] = ck.params[f"{role}/{name}"]
            p.grad = None
            opt.m[name][...] = ck.moments[f"{role}/{name}/m"]
            opt.v[name][...] = ck.moments[f"{role}/{name}/v"]
        opt.t = ck.step
    for role, buf in state.buffers().items():
        buf.restore([img.copy() for img in ck.buffers.get(role, [])])
    state.epoch, state.step, state.seed = ck.epoch, ck.step, ck.seed
    return state


class ArchitectureMismatch(ValueError):
    pass
