"""Single-image super-resolution with a from-scratch autodiff engine."""

from .blocks import (
    MBMFN,
    ModelConfig,
    ParamStore,
    count_params,
    init_params,
    mbmfn_forward,
)
from .config import RunConfig, format_config, parse_config
from .data import ImagePlane, bicubic_resize, degrade, load_image, load_manifest, save_image
from .metrics import MetricReport, evaluate, psnr, ssim
from .tensor import Tape, Tensor, backward
from .training import (
    TrainConfig,
    TrainState,
    adam_step,
    learning_rate,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "MBMFN",
    "ModelConfig",
    "ParamStore",
    "count_params",
    "init_params",
    "mbmfn_forward",
    "RunConfig",
    "format_config",
    "parse_config",
    "ImagePlane",
    "bicubic_resize",
    "degrade",
    "load_image",
    "load_manifest",
    "save_image",
    "MetricReport",
    "evaluate",
    "psnr",
    "ssim",
    "Tape",
    "Tensor",
    "backward",
    "TrainConfig",
    "TrainState",
    "adam_step",
    "learning_rate",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "__version__",
]
