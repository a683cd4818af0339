"""First-order update rules with per-group learning rates.

Two parameter groups: the body (all layers but the last) steps at the
base learning rate, the head (output layer plus the trainable margin
scalar, when present) at base times a multiplier.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import GradVector, ParamVector


@dataclass
class AdamState:
    """Moment estimates and step counter for Adam."""

    m: ParamVector
    v: ParamVector
    t: int = 0
    base_lr: float = 1e-3
    head_lr_multiplier: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps_hat: float = 1e-8

    def __post_init__(self):
        if self.base_lr <= 0.0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.head_lr_multiplier <= 0.0:
            raise ValueError(f"head_lr_multiplier must be positive, got {self.head_lr_multiplier}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if self.eps_hat <= 0.0:
            raise ValueError(f"eps_hat must be positive, got {self.eps_hat}")

    @classmethod
    def create(
        cls,
        theta: ParamVector,
        base_lr: float = 1e-3,
        head_lr_multiplier: float = 10.0,
        beta1: float = 0.9,
        beta2: float = 0.99,
        eps_hat: float = 1e-8,
    ) -> "AdamState":
        return cls(
            m=theta.zeros_like(),
            v=theta.zeros_like(),
            t=0,
            base_lr=base_lr,
            head_lr_multiplier=head_lr_multiplier,
            beta1=beta1,
            beta2=beta2,
            eps_hat=eps_hat,
        )


def adam_step(theta: ParamVector, grad: GradVector, state: AdamState) -> ParamVector:
    """One Adam update; mutates `state`, returns the new parameters.

    Bias correction is folded into the step size:
        theta_new = theta - lr_group * sqrt(1-b2^t)/(1-b1^t) * m / (sqrt(v) + eps_hat)
    so on the first step |delta| = lr * |g| / (|g| + eps_hat * sqrt(1/(1-b2))).
    """
    t_arrays = theta.arrays()
    g_arrays = grad.arrays()
    if len(t_arrays) != len(g_arrays) or any(
        a.shape != b.shape for a, b in zip(t_arrays, g_arrays)
    ):
        raise ValueError("gradient structure does not match parameters")
    for g in g_arrays:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("gradient contains non-finite values")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction = math.sqrt(1.0 - b2**state.t) / (1.0 - b1**state.t)
    out = theta.copy()
    flags = theta.head_flags()
    for dst, g, m, v, is_head in zip(
        out.arrays(), g_arrays, state.m.arrays(), state.v.arrays(), flags
    ):
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        lr = state.base_lr * (state.head_lr_multiplier if is_head else 1.0)
        dst[...] = dst - (lr * correction) * m / (np.sqrt(v) + state.eps_hat)
    return out


def sgd_step(theta: ParamVector, grad: GradVector, lr: float) -> ParamVector:
    """Plain gradient descent: theta - lr * grad."""
    if lr < 0.0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    t_arrays = theta.arrays()
    g_arrays = grad.arrays()
    if len(t_arrays) != len(g_arrays) or any(
        a.shape != b.shape for a, b in zip(t_arrays, g_arrays)
    ):
        raise ValueError("gradient structure does not match parameters")
    for g in g_arrays:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("gradient contains non-finite values")
    out = theta.copy()
    for dst, g in zip(out.arrays(), g_arrays):
        dst[...] = dst - lr * g
    return out
