"""Spiking networks with local learning, fixed-point quantization and
Hessian-trace guided bit allocation."""

from .allocation import (
    BitConfig,
    SizeReport,
    enumerate_configs,
    model_size,
    param_counts,
    reference_specs,
    rank_by_trace,
    recommend,
)
from .errors import (
    ConfigurationError,
    DataError,
    FormatError,
    InfeasibleBudgetError,
    InputError,
    NumericalError,
    SnnQuantError,
    StateCorruptionError,
)
from .estimator import SpikingClassifier
from .events import bin_events, read_events, synth_dataset, synth_split, write_events
from .hessian import HutchinsonConfig, TraceEstimate, exact_trace, hutchinson, hutchinson_trace
from .network import LayerSpec, Network, evaluate, layer_forward_step, train_epoch
from .neuron import InferState, LifParams, TrainState, step_inference, step_training
from .quant import FixedPointFormat, LayerBits, QuantPolicy, quantize_nearest, quantize_stochastic, rng_stream

__version__ = "0.1.0"

__all__ = [
    "BitConfig",
    "SizeReport",
    "enumerate_configs",
    "model_size",
    "param_counts",
    "reference_specs",
    "rank_by_trace",
    "recommend",
    "ConfigurationError",
    "DataError",
    "FormatError",
    "InfeasibleBudgetError",
    "InputError",
    "NumericalError",
    "SnnQuantError",
    "StateCorruptionError",
    "SpikingClassifier",
    "bin_events",
    "read_events",
    "synth_dataset",
    "synth_split",
    "write_events",
    "HutchinsonConfig",
    "TraceEstimate",
    "exact_trace",
    "hutchinson",
    "hutchinson_trace",
    "LayerSpec",
    "Network",
    "evaluate",
    "layer_forward_step",
    "train_epoch",
    "InferState",
    "LifParams",
    "TrainState",
    "step_inference",
    "step_training",
    "FixedPointFormat",
    "LayerBits",
    "QuantPolicy",
    "quantize_nearest",
    "quantize_stochastic",
    "rng_stream",
]
