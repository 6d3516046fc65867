"""Temporal memory attention for video semantic segmentation on a float64 autodiff core."""

from .data import (
    SyntheticSceneSpec,
    VideoClip,
    generate_clip,
    make_snippets,
    read_dataset,
    write_dataset,
)
from .errors import (
    ContractError,
    EmptyLossError,
    FormatError,
    SamplingError,
    ShapeError,
    TMAError,
)
from .metrics import ConfusionMatrix, evaluate, miou
from .model import ModelConfig, TMANet
from .train import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix",
    "ContractError",
    "EmptyLossError",
    "FormatError",
    "ModelConfig",
    "SamplingError",
    "ShapeError",
    "SyntheticSceneSpec",
    "TMAError",
    "TMANet",
    "TrainConfig",
    "VideoClip",
    "evaluate",
    "generate_clip",
    "make_snippets",
    "miou",
    "read_dataset",
    "run_training",
    "write_dataset",
]
