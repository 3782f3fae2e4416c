"""Scalable learned point-cloud geometry coding.

A base layer is coded by a small learned hyperprior codec; each further
layer refines quality or resolution by predicting its latents from the
previous layer's decoded latents (RQuLPE-C for coordinates, RQuLPE-F for
features) instead of coding them from scratch.
"""

from .codec import decode_scalable, encode_scalable
from .core import (CodingConfig, CorruptStream, InvalidInput, InvalidParameter, PointCloud, RangeError,
                   SparseTensor, StructuralMismatch, parse_chain)
from .enhancement import InvalidLayerChain, LayerConfig, validate_layer_chain

__version__ = "0.1.0"

__all__ = [
    "CodingConfig", "CorruptStream", "InvalidInput", "InvalidLayerChain", "InvalidParameter", "LayerConfig",
    "PointCloud", "RangeError", "SparseTensor", "StructuralMismatch", "decode_scalable", "encode_scalable",
    "parse_chain", "validate_layer_chain",
]
