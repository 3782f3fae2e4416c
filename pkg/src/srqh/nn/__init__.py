"""Minimal numpy neural-network substrate: autodiff, sparse layers, Adam."""

from . import autograd, layers
from .autograd import Tensor, no_grad
from .layers import SparseConvSpec, STensor
from .params import Adam, ParamStore, adam_step

__all__ = ["Adam", "ParamStore", "STensor", "SparseConvSpec", "Tensor", "adam_step", "autograd", "layers", "no_grad"]
