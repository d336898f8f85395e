"""Desk-scale contrastive music representation pretraining via source association."""

__version__ = "0.1.0"

from .config import ExperimentConfig, GeneratorConfig, ModelConfig, ProbeConfig, TrainConfig
from .dataset import Dataset
from .dsp import MelConfig, MelSpectrogram, Waveform
from .loss import LossSpec
from .pairing import PairBatch, PairVariant

__all__ = [
    "Dataset", "ExperimentConfig", "GeneratorConfig", "LossSpec", "MelConfig",
    "MelSpectrogram", "ModelConfig", "PairBatch", "PairVariant", "ProbeConfig",
    "TrainConfig", "Waveform", "__version__",
]
