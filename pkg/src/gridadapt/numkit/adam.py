"""Adam optimizer with bias correction.

Defaults follow the usual segmentation-adaptation recipe: lr 5e-6,
beta1 0.9, beta2 0.999.
"""

from __future__ import annotations

import numpy as np


class AdamState:
    """First/second moment buffers for a fixed parameter group.

    The group is bound at construction; ``adam_step`` refuses any other
    parameter list. The step counter increases by exactly 1 per update.
    """

    def __init__(self, params, lr=5e-6, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def _param_label(p, idx):
    return p.name if p.name else f"param[{idx}]"


def adam_step(params, state):
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    params = list(params)
    if len(params) != len(state.params) or any(p is not q for p, q in zip(params, state.params)):
        raise ValueError("adam_step: params do not match the optimizer state's parameter group")
    for idx, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: missing gradient for {_param_label(p, idx)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.grad[...] = 0
