"""Timing side-channel laboratory for max-pooling in CNN inference."""

__version__ = "0.1.0"

from .tensor import Tensor, pad2d, tensor_new
from .engine import ModelSpec, PoolVariant, build_custom_cnn, maxpool_forward, model_forward
from .harness import CollectionProtocol, SurrogateChannel, WallClockChannel, run_protocol
from .analyzer import LeakageReport, analyze_pairs, classify_pair
from .attack import AttackDataset, MLPSpec, mia_run, overlap_sweep

__all__ = [
    "Tensor", "tensor_new", "pad2d",
    "ModelSpec", "PoolVariant", "build_custom_cnn", "maxpool_forward", "model_forward",
    "CollectionProtocol", "SurrogateChannel", "WallClockChannel", "run_protocol",
    "LeakageReport", "analyze_pairs", "classify_pair",
    "AttackDataset", "MLPSpec", "mia_run", "overlap_sweep",
]
