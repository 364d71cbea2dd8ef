"""Minimal dense-tensor core with reverse-mode automatic differentiation."""
from .nn import (
    DepthwiseConv1d,
    Dropout,
    EncoderLayer,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    parameter,
    philox,
)
from .optim import Adam, AdamState, adam_step, config_hash, gradcheck, load_checkpoint, save_checkpoint
from .tensor import (
    Tensor,
    add,
    as_tensor,
    bce_with_logits,
    concat,
    depthwise_conv1d,
    dropout,
    layer_norm,
    linear,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
)
