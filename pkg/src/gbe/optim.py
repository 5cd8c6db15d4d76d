"""Adam with decoupled weight decay."""

from dataclasses import dataclass, field

import numpy as np

from gbe.errors import UsageError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, state):
    """Update ``params`` in place from their ``.grad`` and zero the grads.

    Weight decay is applied directly to the parameters (``p -= lr * wd * p``),
    not folded into the gradient.
    """
    params = list(params)
    missing = [p.name or f"#{i}" for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise UsageError(f"adam_step: no gradient for parameter(s) {', '.join(missing)}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise UsageError("adam_step: parameter list changed between steps")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.data -= (state.lr * state.weight_decay) * p.data
        p.data -= (state.lr * update).astype(p.dtype)
        p.grad = np.zeros_like(p.data)
