"""Desk-scale sparse mixture-of-experts training with dot-product or hypersphere routing."""

__version__ = "0.1.0"

from .config import RunConfig, load_run_config
from .model import Model, ModelConfig, encode, mlm_logits
from .routing import RouterConfig
from .training import TrainConfig, finetune_frozen, pretrain

__all__ = [
    "Model",
    "ModelConfig",
    "RouterConfig",
    "RunConfig",
    "TrainConfig",
    "encode",
    "finetune_frozen",
    "load_run_config",
    "mlm_logits",
    "pretrain",
]
