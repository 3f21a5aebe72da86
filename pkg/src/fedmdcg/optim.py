"""Plain SGD and Adam steps over ParamSets.

Weight decay is the coupled form for both optimizers: it is added to the
gradient before the update rule, i.e. g <- g + wd * p.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .params import ParamSet


def _check_grads(params: ParamSet, grads: Dict[str, np.ndarray]) -> None:
    for k in params.keys():
        if k not in grads:
            raise ValueError(f"missing gradient for parameter {k!r}")
        if grads[k].shape != params[k].data.shape:
            raise ValueError(
                f"gradient shape {grads[k].shape} != parameter shape "
                f"{params[k].data.shape} for {k!r}")


def sgd_step(params: ParamSet, grads: Dict[str, np.ndarray], lr: float,
             weight_decay: float = 0.0) -> ParamSet:
    """One vanilla SGD step, updating parameter buffers in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    _check_grads(params, grads)
    for k in params.keys():
        p = params[k].data
        p -= lr * (grads[k] + weight_decay * p)
    return params


@dataclass
class AdamState:
    """First/second moment buffers and step counter for one ParamSet."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamSet, grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> tuple[ParamSet, AdamState]:
    """One Adam step with bias correction, in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    _check_grads(params, grads)
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    scale = lr / bc1
    inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
    for k in params.keys():
        p = params[k].data
        g = grads[k] if weight_decay == 0.0 else grads[k] + weight_decay * p
        m = state.m.get(k)
        if m is None:
            m = np.zeros_like(p)
            state.m[k] = m
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        denom = np.sqrt(v)
        denom *= inv_sqrt_bc2
        denom += eps
        p -= scale * m / denom
    return params, state
