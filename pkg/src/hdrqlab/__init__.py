"""Merge-friendly post-training quantization at desk scale."""

from .nnet import Batch, Layer, Network
from .quant import QuantScheme, QuantizedTensor
from .checkpoint import QuantizedCheckpoint
from .hdrq import PtqConfig, PtqResult, reconstruct
from .merge import MergeReport, harmonic_mean, run_merge

__version__ = "0.1.0"

__all__ = [
    "Batch", "Layer", "MergeReport", "Network", "PtqConfig", "PtqResult", "QuantScheme",
    "QuantizedCheckpoint", "QuantizedTensor", "harmonic_mean", "reconstruct", "run_merge",
]
