from . import tensor
from .layers import Affine, Embedding, GruLayer, GruStack, Mlp, Module, uniform_init
from .optim import Adam, clip_global_norm
from .tensor import (
    Tensor,
    concat,
    embedding,
    entropy_rows,
    log_probs,
    masked_log_softmax_kernel,
    mean,
    no_grad,
    parameter,
    reshape,
    rows,
    softmax_xent,
    total,
    weighted_sum,
    xent_rows,
)

__all__ = [
    "Adam", "Affine", "Embedding", "GruLayer", "GruStack", "Mlp", "Module",
    "Tensor", "clip_global_norm", "concat", "embedding", "entropy_rows", "log_probs",
    "masked_log_softmax_kernel", "mean", "no_grad", "parameter", "reshape", "rows",
    "softmax_xent", "tensor", "total", "uniform_init", "weighted_sum",
    "xent_rows",
]
