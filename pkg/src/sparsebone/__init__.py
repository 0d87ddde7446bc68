"""Sparse-voxel bone segmentation engine for CT volumes."""

from .network import Checkpoint, UNetConfig, init_network, network_forward
from .pipeline import FusionConfig, SamplingConfig, predict_volume
from .voxgrid import SparseTensor

__all__ = ["Checkpoint", "FusionConfig", "SamplingConfig", "SparseTensor", "UNetConfig",
           "init_network", "network_forward", "predict_volume"]
__version__ = "0.1.0"
