"""Part-token skeleton action recognition with intra-inter-part attention."""

from .autodiff import FlopCounter, Tensor, backward
from .model import ModelConfig, ModelParams, forward, forward_coords, init_params
from .skeldata import (
    PartitionMap,
    SkeletonSequence,
    default_partition_map,
    identity_partition_map,
    load_sequence,
    save_sequence,
)
from .training import EvalReport, TrainConfig, evaluate, fuse_streams, train

__version__ = "0.1.0"

__all__ = [
    "FlopCounter",
    "Tensor",
    "backward",
    "ModelConfig",
    "ModelParams",
    "forward",
    "forward_coords",
    "init_params",
    "PartitionMap",
    "SkeletonSequence",
    "default_partition_map",
    "identity_partition_map",
    "load_sequence",
    "save_sequence",
    "EvalReport",
    "TrainConfig",
    "evaluate",
    "fuse_streams",
    "train",
    "__version__",
]
