"""Dense float64 tensors, a recording tape for reverse-mode gradients, AdamW."""

from .errors import ContractError, DimensionError, NumericError, TapeReuseError
from .optim import AdamW, AdamWState, adamw_step
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    binary_cross_entropy,
    broadcast_to,
    clip,
    concat,
    conv2d,
    cross_entropy,
    div,
    embedding,
    exp,
    gelu,
    index,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax_rows,
    sqrt,
    sub,
    sum_,
    swapaxes,
    transpose,
)
from .serialize import load_checkpoint, load_tensor, save_checkpoint, save_tensor

__all__ = [name for name in dir() if not name.startswith("_")]
