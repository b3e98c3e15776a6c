"""Minimal dense-tensor kernel with reverse-mode differentiation.

Everything is float64 and deterministic. The public surface is the
:class:`Tensor` type plus the op functions in :mod:`rlfolio.numcore.tensor`,
parameter management / Adam in :mod:`rlfolio.numcore.graph`, and the binary
checkpoint container in :mod:`rlfolio.numcore.checkpoint`.
"""

from rlfolio.numcore.tensor import (
    Tensor,
    as_tensor,
    add,
    sub,
    mul,
    div,
    neg,
    matmul,
    reshape,
    transpose,
    getitem,
    concat,
    tsum,
    tmean,
    sigmoid,
    tanh,
    relu,
    exp,
    log,
    softmax,
    conv1d_causal,
    lstm_cell,
    backward,
)
from rlfolio.numcore.graph import CompGraph, ParamStore, uniform_init
from rlfolio.numcore.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "tsum",
    "tmean",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "softmax",
    "conv1d_causal",
    "lstm_cell",
    "backward",
    "CompGraph",
    "ParamStore",
    "uniform_init",
    "save_checkpoint",
    "load_checkpoint",
]
