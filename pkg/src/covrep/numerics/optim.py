"""First-order optimizers over MlpParams. Inputs are never mutated."""

from __future__ import annotations

import numpy as np

from .mlp import GradientBundle, MlpParams, ShapeError


def _check(params: MlpParams, grads: GradientBundle):
    for p, g in zip(params.arrays(), grads.arrays()):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if len(params.arrays()) != len(grads.arrays()):
        raise ShapeError("gradient bundle does not match parameter layout")


def sgd_step(params: MlpParams, grads: GradientBundle, rate: float) -> MlpParams:
    """Plain gradient step ``p - rate * g``."""
    if rate < 0:
        raise ValueError("rate must be non-negative")
    _check(params, grads)
    if rate == 0:
        return params.copy()
    return params.replace(
        [w - rate * gw for w, gw in zip(params.weights, grads.weights)],
        [b - rate * gb for b, gb in zip(params.biases, grads.biases)],
    )


class Adam:
    """Adam with bias correction; keeps its own moment buffers."""

    def __init__(self, rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if rate < 0:
            raise ValueError("rate must be non-negative")
        self.rate = rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = None
        self._v = None

    def step(self, params: MlpParams, grads: GradientBundle) -> MlpParams:
        _check(params, grads)
        g = grads.arrays()
        if self._m is None:
            self._m = [np.zeros_like(a) for a in g]
            self._v = [np.zeros_like(a) for a in g]
        self.t += 1
        if self.rate == 0:
            return params.copy()
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        new = []
        for p, gi, m, v in zip(params.arrays(), g, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * gi
            v *= self.beta2
            v += (1.0 - self.beta2) * gi * gi
            new.append(p - self.rate * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return params.replace(new[0::2], new[1::2])


def make_stepper(kind: str, rate: float):
    """Uniform ``step(params, grads) -> params`` callable for 'sgd' or 'adam'."""
    if kind == "sgd":
        return lambda p, g: sgd_step(p, g, rate)
    if kind == "adam":
        return Adam(rate).step
    raise ValueError(f"unknown optimizer {kind!r}")
