"""Dilated inception saliency networks on a small numpy autodiff engine."""

from .config import RunConfig, load_config
from .losses import loss_value, normalize
from .metrics import auc, cc, nss, sauc
from .model import DilationRates, DimVariant, build_model, count_params

__all__ = [
    "DilationRates",
    "DimVariant",
    "RunConfig",
    "auc",
    "build_model",
    "cc",
    "count_params",
    "load_config",
    "loss_value",
    "normalize",
    "nss",
    "sauc",
]
__version__ = "0.1.0"
