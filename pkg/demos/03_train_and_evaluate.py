"""
Training both branches on synthetic scenes
==========================================

Renders a small street-scene dataset, trains the semantic and depth
generators side by side for a few dozen steps, then scores them. This takes
about a minute on one core. For a desk-scale run use the command line:

    mtgan gen-data --out data/train --count 256
    mtgan train --out runs/a data=data/train steps=300
    mtgan eval-seg --ckpt runs/a/last.mtgn --data data/train --out seg.csv
"""

import tempfile
from pathlib import Path

import numpy as np

from mtgan.cli import image_grid
from mtgan.config import RunConfig
from mtgan.data import ArrayDataset, SceneSpec, generate_scene, write_ppm
from mtgan.evaluation import cityscapes_palette
from mtgan.runner import (Trainer, evaluate_depth_model, evaluate_semantic_model, predict_depth,
                          predict_semantic)

# Every scene is a pure function of (seed, index): sky, a building skyline,
# a road plane whose depth falls toward the camera, and a few upright objects.
spec = SceneSpec(seed=5, height=32, width=32)
train = ArrayDataset.from_samples([generate_scene(spec, i) for i in range(32)])
held_out = ArrayDataset.from_samples([generate_scene(SceneSpec(seed=6, height=32, width=32), i)
                                      for i in range(16)])
print("train rgb", train.rgb.shape, "sparse coverage", float(train.sparse_mask.mean()))

# Narrow networks keep the demo quick; the loss weights and optimizer are the
# defaults used for full runs.
cfg = RunConfig(base_width=8, batch_size=4, steps=40)
trainer = Trainer(cfg, train)
palette = cityscapes_palette()


def report(tag):
    s = trainer.state
    seg = evaluate_semantic_model(s.semantic.G, held_out, palette)
    dep = evaluate_depth_model(s.semantic.G, s.depth.G, held_out)
    print(f"{tag:>9}: pixel acc {seg.per_pixel_acc:.3f}  mIoU {seg.mean_iou:.3f}  "
          f"RMSE {dep.rmse_mm:7.0f} mm")


report("untrained")
for _ in range(cfg.steps):
    row = trainer.step()
    if row["step"] % 10 == 9:
        print(f"step {row['step'] + 1:3d}  semantic cyc {row['sem_cyc']:.3f}  "
              f"depth L_d {row['dep_depth']:.4f}  smooth {row['dep_smooth']:.4f}")
report(f"{cfg.steps} steps")

# A mosaic of input / generated semantics / generated depth, one row per image.
s = trainer.state
sem = predict_semantic(s.semantic.G, held_out.rgb[:4])
dep = predict_depth(s.semantic.G, s.depth.G, held_out.rgb[:4], held_out.sparse[:4])
out = Path(tempfile.gettempdir()) / "mtgan_demo_grid.ppm"
write_ppm(out, image_grid(held_out.rgb[:4], sem, dep))
print("wrote", out, "mean depth output", float(np.mean(dep)))
