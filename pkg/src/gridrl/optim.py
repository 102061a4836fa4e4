"""Bias-corrected Adam over a ParamStore."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .tensor import ParamStore


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict, state: AdamState, lr: float, names=None) -> None:
    """One Adam update of ``names`` (default: every parameter)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name in names if names is not None else params.names():
            p = params[name]
            g = grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
