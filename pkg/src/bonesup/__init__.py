"""Bone suppression in synthetic chest radiographs with image-to-image GANs.

Everything runs on numpy: a small reverse-mode autodiff engine, U-Net
generators, patch discriminators, paired and unpaired trainers, a phantom
generator with an exact dual-energy composition law, and evaluation tools.
"""

import os

# Single-threaded BLAS keeps float32 reductions bit-reproducible across runs.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .errors import (  # noqa: E402
    BoneSupError,
    ConfigError,
    DimensionError,
    DivergenceError,
    FormatError,
    NumericError,
    UndefinedMetricError,
    UsageError,
)
from .evaluation import MetricsReport, evaluate_model, read_report  # noqa: E402
from .metrics import psnr, roc_auc, ssim  # noqa: E402
from .networks import Discriminator, Generator  # noqa: E402
from .phantom import Dataset, PhantomConfig, generate_dataset, generate_phantom  # noqa: E402
from .tensor import Tensor, backward, grad_check, no_grad  # noqa: E402
from .training import TrainConfig, TranslationModel, train_paired, train_unpaired  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "BoneSupError", "ConfigError", "DimensionError", "DivergenceError", "FormatError",
    "NumericError", "UndefinedMetricError", "UsageError",
    "Dataset", "Discriminator", "Generator", "MetricsReport", "PhantomConfig", "Tensor",
    "TrainConfig", "TranslationModel",
    "backward", "evaluate_model", "generate_dataset", "generate_phantom", "grad_check",
    "load_checkpoint", "no_grad", "psnr", "read_report", "roc_auc", "save_checkpoint",
    "ssim", "train_paired", "train_unpaired",
]
