"""Progressive stochastic binarization: shift-only inference with capacitor units."""
from .capacitor import Mode, SamplingConfig
from .encoding import EncodingConfig, PsbTensor, PsbWeight, decode_mean, encode_weight
from .graph import ForwardReport, Layer, Model, convert_to_psb, fold_batchnorm, forward, prune_magnitude
from .modelio import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "EncodingConfig", "ForwardReport", "Layer", "Mode", "Model", "PsbTensor", "PsbWeight",
    "SamplingConfig", "convert_to_psb", "decode_mean", "encode_weight", "fold_batchnorm",
    "forward", "load_model", "prune_magnitude", "save_model",
]
