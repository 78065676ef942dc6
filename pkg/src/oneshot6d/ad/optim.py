"""AdamW on named parameter dicts, plus the warmup/cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeMismatch
from .tensor import Tensor


class AdamWState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
):
    """Decoupled-weight-decay Adam update, in place on params."""
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} vs param {p.data.shape} ({name})")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)


def warmup_cosine_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear 0->base over warmup, then cosine decay to 0 at total_steps."""
    if step < warmup_steps:
        return base_lr * step / max(warmup_steps, 1)
    if step >= total_steps:
        return 0.0
    frac = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
