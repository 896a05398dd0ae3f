"""Rotary-position 3D transformer segmentation on a small numpy autodiff engine."""

from .errors import (ConfigError, ContractError, DataError, FormatError, NumericalError, RotosegError,
                     ShapeError)
from .io import Volume, read_checkpoint, read_volume, write_checkpoint, write_volume
from .model import ModelConfig, SegmentationModel, forward_mim, forward_seg, init_params
from .tensor import Tensor, check_mode, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "FormatError", "NumericalError", "RotosegError", "ShapeError",
    "Volume", "read_checkpoint", "read_volume", "write_checkpoint", "write_volume",
    "ModelConfig", "SegmentationModel", "forward_mim", "forward_seg", "init_params",
    "Tensor", "check_mode", "no_grad",
]
