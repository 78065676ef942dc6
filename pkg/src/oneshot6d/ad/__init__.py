from .tensor import (  # noqa: F401
    bmm,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    clip_min,
    concat,
    conv2d,
    cosine_similarity_matrix,
    elu,
    exp,
    gather_rows,
    layernorm,
    linear,
    log,
    matmul,
    mul,
    parameter,
    power,
    relu,
    reshape,
    softmax,
    sqrt,
    tmean,
    transpose,
    tsum,
)
from .optim import AdamWState, adamw_step, warmup_cosine_lr  # noqa: F401
