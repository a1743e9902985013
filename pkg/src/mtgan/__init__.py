"""Multi-task cycle-consistent GAN for semantic segmentation and depth completion.

Everything runs on numpy: a small reverse-mode autodiff core (:mod:`mtgan.tensor`,
:mod:`mtgan.ops`), ResNet generators and PatchGAN discriminators
(:mod:`mtgan.nn`), the loss terms, the alternating trainer, metrics and a
synthetic street-scene dataset.
"""

import os as _os

# BLAS reads its thread count when numpy is first imported, so cap it here.
if _os.environ.get("MTGAN_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ[_var] = _os.environ["MTGAN_THREADS"]

__version__ = "0.1.0"
