from .tensor import (
    MASK_VALUE,
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    concat,
    cosine_similarity,
    cross_entropy,
    div,
    dropout,
    embedding,
    exp,
    gelu,
    getitem,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    softmax_rows,
    sqrt,
    stack,
    sub,
    swap_last,
    tanh,
    tmax,
    transpose,
    tsum,
)
from .optim import AdamW, OptimizerState, optimizer_step, schedule_lr
