"""Self-compressing training toolkit: per-channel bit depths and exponents
are trained parameters, a size penalty drives bit depths toward zero, and
fully drained zero-bit channels are physically removed mid-training."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_cifar10, synthetic_dataset
from .network import NetworkGraph, build_cifar_net, forward_network, validate_network
from .optim import Adam, AdamState, adam_update
from .pruner import PruneCandidate, PruneReport, find_removable, flop_estimate, prune
from .quantizer import (QuantFormat, init_format, quantize, quantize_backward,
                        quantize_channels)
from .sizemodel import (LossBreakdown, SizeReport, layer_size_coupled,
                        layer_size_simple, size_report)
from .trainer import (MetricsRow, TrainConfig, TrainResult, evaluate,
                      gamma_sweep, train)

__version__ = "0.1.0"

__all__ = [
    "Adam", "AdamState", "Dataset", "LossBreakdown", "MetricsRow",
    "NetworkGraph", "PruneCandidate", "PruneReport", "QuantFormat",
    "SizeReport", "TrainConfig", "TrainResult", "adam_update",
    "build_cifar_net", "evaluate", "find_removable", "flop_estimate",
    "forward_network", "gamma_sweep", "init_format", "layer_size_coupled",
    "layer_size_simple", "load_cifar10", "load_checkpoint", "prune",
    "quantize", "quantize_backward", "quantize_channels", "save_checkpoint",
    "size_report", "synthetic_dataset", "train", "validate_network",
]
