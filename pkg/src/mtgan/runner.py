"""Training loop, batched inference and split-level evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .config import RunConfig
from .data import ArrayDataset, unit_to_bytes, unit_to_depth, unpaired_indices
from .evaluation import DepthMetrics, Palette, SegMetrics, cityscapes_palette, \
    evaluate_depth, evaluate_segmentation
from .tensor import Tensor
from .training import (DEPTH_KEYS, SEMANTIC_KEYS, DepthBatch, DepthBranch, NonFiniteLossError,
                       SemanticBatch, SemanticBranch, TrainerState, depth_update, lr_schedule,
                       restore_branch, semantic_update, snapshot_branch, step_rng,
                       train_step_depth, train_step_semantic)

log = logging.getLogger(__name__)

# independent shuffles: RGB and semantic for G_s, (RGB + sparse) and dense for G_d
STREAM_RGB, STREAM_SEM, STREAM_SPARSE, STREAM_DENSE = range(4)

LOSS_COLUMNS = ("step", "lr") + tuple(f"sem_{k}" for k in SEMANTIC_KEYS) \
    + tuple(f"dep_{k}" for k in DEPTH_KEYS)


def semantic_batch(ds: ArrayDataset, batch_size: int, seed: int, step: int) -> SemanticBatch:
    n = len(ds)
    ix = unpaired_indices(n, batch_size, seed, STREAM_RGB, step)
    iy = unpaired_indices(n, batch_size, seed, STREAM_SEM, step)
    return SemanticBatch(ds.rgb[ix], ds.semantic[iy])


def depth_batch(ds: ArrayDataset, batch_size: int, seed: int, step: int) -> DepthBatch:
    n = len(ds)
    ix = unpaired_indices(n, batch_size, seed, STREAM_SPARSE, step)
    iy = unpaired_indices(n, batch_size, seed, STREAM_DENSE, step)
    return DepthBatch(ds.rgb[ix], ds.sparse[ix], ds.sparse_mask[ix], ds.dense[iy])


def build_state(cfg: RunConfig, image_size) -> TrainerState:
    state = TrainerState.create(cfg.seed, cfg.base_width, tuple(image_size),
                                cfg.semantic_options(), cfg.depth_options(),
                                cfg.loss_weights(), cfg.optimizer(), cfg.buffer_size)
    state.config = {"run": cfg}
    return state


class Trainer:
    """Drives one run: a semantic update then a depth update per outer step."""

    def __init__(self, cfg: RunConfig, train: ArrayDataset, state: TrainerState | None = None):
        self.cfg = cfg
        self.train = train
        self.state = state or build_state(cfg, train.rgb.shape[2:])
        self.steps_per_epoch = len(train) // cfg.batch_size
        if self.steps_per_epoch == 0:
            raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(train)}")

    def step(self) -> dict:
        s = self.state
        s.epoch = s.step // self.steps_per_epoch
        lr = s.lr()
        # a depth abort must also undo the semantic half, keeping the step atomic
        snap = snapshot_branch(s.semantic)
        sem = train_step_semantic(s, semantic_batch(self.train, self.cfg.batch_size,
                                                    s.seed, s.step))
        try:
            dep = train_step_depth(s, depth_batch(self.train, self.cfg.batch_size, s.seed,
                                                  s.step))
        except NonFiniteLossError:
            restore_branch(s.semantic, snap)
            raise
        row = {"step": s.step, "lr": lr}
        row.update({f"sem_{k}": v for k, v in sem.items()})
        row.update({f"dep_{k}": v for k, v in dep.items()})
        s.step += 1
        return row


# -- inference -------------------------------------------------------------------

def predict_semantic(G_s: nn.ModelParams, rgb: np.ndarray, batch: int = 16) -> np.ndarray:
    frozen = G_s.frozen()
    return np.concatenate([nn.generator_forward(Tensor(rgb[i:i + batch]), frozen).data
                           for i in range(0, len(rgb), batch)])


def predict_depth(G_s: nn.ModelParams, G_d: nn.ModelParams, rgb: np.ndarray,
                  sparse: np.ndarray, use_semantic_input: bool = True,
                  batch: int = 16) -> np.ndarray:
    """Normalized dense depth from G_d(sparse, rgb, G_s(rgb))."""
    sem = predict_semantic(G_s, rgb, batch) if use_semantic_input else np.zeros_like(rgb)
    x = np.concatenate([sparse, rgb, sem], axis=1)
    frozen = G_d.frozen()
    return np.concatenate([nn.generator_forward(Tensor(x[i:i + batch]), frozen).data
                           for i in range(0, len(x), batch)])


def semantic_rgb8(pred: np.ndarray) -> list:
    return [unit_to_bytes(p) for p in pred]


def evaluate_semantic_model(G_s: nn.ModelParams, ds: ArrayDataset,
                            palette: Palette | None = None) -> SegMetrics:
    palette = palette or cityscapes_palette()
    return evaluate_segmentation(semantic_rgb8(predict_semantic(G_s, ds.rgb)),
                                 list(ds.semantic_ids), palette)


def depth_prediction_mm(pred_unit: np.ndarray, dmax_mm: float) -> np.ndarray:
    return unit_to_depth(pred_unit[:, 0], dmax_mm)


def evaluate_depth_model(G_s: nn.ModelParams, G_d: nn.ModelParams, ds: ArrayDataset,
                         use_semantic_input: bool = True) -> DepthMetrics:
    pred = predict_depth(G_s, G_d, ds.rgb, ds.sparse, use_semantic_input)
    return evaluate_depth(list(depth_prediction_mm(pred, ds.dmax_mm)), list(ds.dense_mm))


# -- ablations -------------------------------------------------------------------
#
# All variants of one seed train side by side on the same batches and the
# same replay-buffer draws. Depth variants read the "total" semantic
# generator, as in a full run.

SEMANTIC_VARIANTS = {
    "total": dict(use_mssp=True, use_rec=True),
    "mssp": dict(use_mssp=True, use_rec=False),
    "rec": dict(use_mssp=False, use_rec=True),
}
DEPTH_VARIANTS = {
    "full": dict(use_semantic_input=True, smoothness_guide="semantic"),
    "rgb_smooth": dict(use_semantic_input=True, smoothness_guide="rgb"),
    "no_semantic": dict(use_semantic_input=False, smoothness_guide="rgb"),
}


@dataclass
class AblationResult:
    seed: int
    steps: int
    baseline_accuracy: float
    baseline_rmse: dict
    accuracy: dict
    rmse: dict
    seconds: dict = field(default_factory=dict)  # training time per variant

    def to_dict(self) -> dict:
        return asdict(self)

    def standard_run_seconds(self) -> float:
        """Cost of a plain run: the total semantic plus the full depth variant."""
        return self.seconds["sem_total"] + self.seconds["dep_full"]


def run_ablation(cfg: RunConfig, train: ArrayDataset, evaluation: ArrayDataset,
                 semantic_variants=SEMANTIC_VARIANTS, depth_variants=DEPTH_VARIANTS,
                 progress=None) -> AblationResult:
    if "total" not in semantic_variants:
        raise ValueError("the 'total' semantic variant drives the depth branches")
    size = tuple(train.rgb.shape[2:])
    sem = {name: SemanticBranch.create(cfg.seed, cfg.base_width, size,
                                       replace(cfg, **kw).semantic_options(), cfg.buffer_size)
           for name, kw in semantic_variants.items()}
    dep = {name: DepthBranch.create(cfg.seed, cfg.base_width, size,
                                    replace(cfg, **kw).depth_options(), cfg.buffer_size)
           for name, kw in depth_variants.items()}
    weights, opt = cfg.loss_weights(), cfg.optimizer()
    per_epoch = len(train) // cfg.batch_size

    palette = cityscapes_palette()
    base_acc = evaluate_semantic_model(sem["total"].G, evaluation, palette).per_pixel_acc
    base_rmse = {name: evaluate_depth_model(sem["total"].G, b.G, evaluation,
                                            b.options.use_semantic_input).rmse_mm
                 for name, b in dep.items()}

    seconds = {f"sem_{n}": 0.0 for n in sem} | {f"dep_{n}": 0.0 for n in dep}
    for step in range(cfg.steps):
        lr = lr_schedule(step // per_epoch, opt)
        sb = semantic_batch(train, cfg.batch_size, cfg.seed, step)
        db = depth_batch(train, cfg.batch_size, cfg.seed, step)
        for name, b in sem.items():
            t0 = time.perf_counter()
            semantic_update(b, sb, weights, lr, step_rng(cfg.seed, 1, step), opt)
            seconds[f"sem_{name}"] += time.perf_counter() - t0
        for name, b in dep.items():
            t0 = time.perf_counter()
            depth_update(b, db, sem["total"].G, weights, lr, step_rng(cfg.seed, 2, step), opt)
            seconds[f"dep_{name}"] += time.perf_counter() - t0
        if progress is not None:
            progress(step)

    acc = {name: evaluate_semantic_model(b.G, evaluation, palette).per_pixel_acc
           for name, b in sem.items()}
    rmse = {name: evaluate_depth_model(sem["total"].G, b.G, evaluation,
                                       b.options.use_semantic_input).rmse_mm
            for name, b in dep.items()}
    return AblationResult(cfg.seed, cfg.steps, base_acc, base_rmse, acc, rmse, seconds)
