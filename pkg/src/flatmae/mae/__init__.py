from .checkpoint import read_checkpoint, write_checkpoint
from .estimator import FlatMAE
from .model import MaeConfig, MaskedAutoencoder, count_params, masked_mse
from .optim import TrainState, adamw_step, decay_mask, lr_at, peak_lr
from .train import (
    PretrainConfig,
    PretrainResult,
    backward,
    forward,
    load_model,
    pretrain,
    reconstruct,
    save_model,
    step_masks,
)

__all__ = [
    "FlatMAE",
    "MaeConfig",
    "MaskedAutoencoder",
    "PretrainConfig",
    "PretrainResult",
    "TrainState",
    "adamw_step",
    "backward",
    "count_params",
    "decay_mask",
    "forward",
    "load_model",
    "lr_at",
    "masked_mse",
    "peak_lr",
    "pretrain",
    "read_checkpoint",
    "reconstruct",
    "save_model",
    "step_masks",
    "write_checkpoint",
]
