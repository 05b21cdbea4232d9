"""Compact facial-expression CNNs in numpy: layers, graph specs, training,
constrained architecture exploration and benchmarking."""
from .arch import ArchSpec, LayerNode, build_reference, count_params, deserialize, serialize
from .data import CLASSES, Sample, synth_dataset
from .trainer import TrainConfig, cross_validate, evaluate, train

__all__ = ["ArchSpec", "LayerNode", "build_reference", "count_params", "deserialize", "serialize",
           "CLASSES", "Sample", "synth_dataset", "TrainConfig", "cross_validate", "evaluate", "train"]
__version__ = "0.1.0"
