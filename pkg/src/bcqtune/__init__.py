"""Binary-coding quantization and scale-only fine-tuning (AlphaTuning) on a toy transformer."""

from .bcq import ROW, BCQMatrix, Method, QuantConfig, dequantize, mse, quantize, quantize_greedy, refine_alternating
from .qlinear import QuantLinear
from .toymodel import ModelConfig, ToyTransformer, count_trainable, init_dense, quantize_model

__version__ = "0.1.0"

__all__ = [
    "ROW", "BCQMatrix", "Method", "QuantConfig", "dequantize", "mse", "quantize", "quantize_greedy",
    "refine_alternating", "QuantLinear", "ModelConfig", "ToyTransformer", "count_trainable",
    "init_dense", "quantize_model",
]
