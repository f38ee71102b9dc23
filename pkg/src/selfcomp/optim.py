"""Adam with split parameter groups.

Weights get L2 decay folded into their gradients; biases and norm
parameters share the weight learning rate without decay; the format
parameters (bit depths, exponents) run at their own learning rate with a
deliberately large epsilon so noisy early gradients cannot accelerate
them. After every step each bit depth is projected back to [0, b_max].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError

BETA1 = 0.9
BETA2 = 0.999


def adam_update(param, grad, m, v, t, lr, eps, weight_decay=0.0):
    """One bias-corrected Adam update, in place on param/m/v."""
    if weight_decay:
        grad = grad + weight_decay * param
    m *= BETA1
    m += (1.0 - BETA1) * grad
    v *= BETA2
    v += (1.0 - BETA2) * grad * grad
    m_hat = m / (1.0 - BETA1 ** t)
    v_hat = v / (1.0 - BETA2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class GroupConfig:
    lr: float
    eps: float
    weight_decay: float = 0.0


@dataclass
class AdamState:
    """First/second moments keyed like the ParamStore, plus the shared
    step counter. Pruning slices these arrays alongside the parameters."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def entries_for(self, key):
        return self.m.get(key), self.v.get(key)


KIND_TO_GROUP = {
    "weight": "weights",
    "bias": "additive",
    "norm_scale": "additive",
    "norm_shift": "additive",
    "quant_b": "quant",
    "quant_e": "quant",
}


class Adam:
    """Optimizer over a ParamStore with weights / additive / quant groups."""

    def __init__(self, store, lr_weights=1e-3, lr_quant=0.5, eps_weights=1e-5,
                 eps_quant=1e-3, weight_decay=5e-4, b_max=16.0):
        self.store = store
        self.groups = {
            "weights": GroupConfig(lr_weights, eps_weights, weight_decay),
            "additive": GroupConfig(lr_weights, eps_weights, 0.0),
            "quant": GroupConfig(lr_quant, eps_quant, 0.0),
        }
        self.b_max = float(b_max)
        self.lr_scale = 1.0  # annealing multiplier shared by all groups
        self.state = AdamState()

    def current_lr(self, group):
        return self.groups[group].lr * self.lr_scale

    def step(self, grads):
        """Apply one update from a {key: gradient} map; missing keys are
        skipped. Projects every bit-depth array to [0, b_max] afterwards."""
        self.state.t += 1
        t = self.state.t
        for key, kind, param in self.store.items():
            grad = grads.get(key)
            if grad is None:
                continue
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"NaN/Inf gradient for {key}")
            cfg = self.groups[KIND_TO_GROUP[kind]]
            if key not in self.state.m:
                self.state.m[key] = np.zeros_like(param)
                self.state.v[key] = np.zeros_like(param)
            adam_update(param, grad, self.state.m[key], self.state.v[key], t,
                        cfg.lr * self.lr_scale, cfg.eps, cfg.weight_decay)
            if kind == "quant_b":
                np.clip(param, 0.0, self.b_max, out=param)
