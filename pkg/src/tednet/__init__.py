"""Trellis encoder-decoder crowd counting on a small numpy/Cython tensor core."""
from .groundtruth import Annotation, render_density
from .kernels import BACKEND
from .losses import combinatorial_loss, distributed_loss, sal_loss, scl_loss
from .metrics import count_metrics, psnr, ssim
from .model import TEDNet, TrellisConfig, parameter_count
from .training import TrainConfig, evaluate, load_model, train

__version__ = "0.1.0"

__all__ = [
    "Annotation", "BACKEND", "TEDNet", "TrainConfig", "TrellisConfig", "combinatorial_loss",
    "count_metrics", "distributed_loss", "evaluate", "load_model", "parameter_count", "psnr",
    "render_density", "sal_loss", "scl_loss", "ssim", "train",
]
