"""MelGlow: a flow-based vocoder whose coupling layers use location-variable convolutions."""
from .audio import MelSpectrogram, Waveform, compute_mel, griffin_lim, read_wav, write_wav
from .config import ConfigFile, FlowConfig, KernelPredictorConfig, STFTConfig, TrainConfig, load_config
from .flow import MelGlow, count_parameters
from .lvc import IntervalMap, KernelSet, lvc_backward, lvc_forward
from .predictor import KernelPredictor
from .train import make_synthetic_dataset, train

__version__ = "0.1.0"

__all__ = [
    "ConfigFile",
    "FlowConfig",
    "IntervalMap",
    "KernelPredictor",
    "KernelPredictorConfig",
    "KernelSet",
    "MelGlow",
    "MelSpectrogram",
    "STFTConfig",
    "TrainConfig",
    "Waveform",
    "compute_mel",
    "count_parameters",
    "griffin_lim",
    "load_config",
    "lvc_backward",
    "lvc_forward",
    "make_synthetic_dataset",
    "read_wav",
    "train",
    "write_wav",
]
