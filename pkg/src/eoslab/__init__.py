"""EOS-token-weighted cross-entropy for controlling generated summary length."""
from .loss import LossConfig, effective_weights, rescale_factor, weighted_ce
from .model import ModelConfig, TokenSequence, Transformer, Vocab

__all__ = [
    "LossConfig",
    "ModelConfig",
    "TokenSequence",
    "Transformer",
    "Vocab",
    "effective_weights",
    "rescale_factor",
    "weighted_ce",
]
__version__ = "0.1.0"
