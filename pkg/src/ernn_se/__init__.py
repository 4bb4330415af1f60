"""Causal speech enhancement with equilibriated recurrent mask estimators.

Everything runs on numpy: a small reverse-mode autodiff core, STFT analysis
and synthesis, ERNN/LSTM mask models, time-domain training, a frame-by-frame
streaming engine and objective metrics.
"""

from .dsp import DEFAULT_CONFIG, StftConfig, istft, stft
from .model import MaskModel, ModelConfig, count_parameters
from .streaming import StreamEnhancer, enhance

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_CONFIG",
    "MaskModel",
    "ModelConfig",
    "StftConfig",
    "StreamEnhancer",
    "count_parameters",
    "enhance",
    "istft",
    "stft",
]
