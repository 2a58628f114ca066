"""Spiking neural network training engine with dual temporal-channel attention."""

from .tensor import (
    ComputationRecord,
    GeometryError,
    RecordError,
    ShapeError,
    Tensor,
    backward,
    zero_grads,
)
from .neuron import LifParams, LifState, lif_step, lif_unroll, surrogate_grad
from .attention import AttentionOutput, DtaParams, TnaParams, TxaParams, dta

__all__ = [
    "AttentionOutput",
    "ComputationRecord",
    "DtaParams",
    "GeometryError",
    "LifParams",
    "LifState",
    "RecordError",
    "ShapeError",
    "Tensor",
    "TnaParams",
    "TxaParams",
    "backward",
    "dta",
    "lif_step",
    "lif_unroll",
    "surrogate_grad",
    "zero_grads",
]
