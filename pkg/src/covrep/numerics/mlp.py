"""Dense multilayer perceptron with exact reverse-mode gradients.

Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
Activations apply to hidden layers; the last layer uses ``output_activation``.
Everything is float64 and batched over the leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import as_generator

HIDDEN_ACTIVATIONS = ("relu", "tanh", "identity", "sigmoid")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")


class ShapeError(ValueError):
    """Input or parameter shapes do not chain."""


def _sigmoid(z):
    # split branches keep exp() from overflowing
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return _sigmoid(z)
    return z


def _act_grad(name, z, a):
    """Derivative of the activation given pre-activation z and output a."""
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return None  # identity: derivative is one, skip the multiply


@dataclass
class MlpParams:
    layer_dims: tuple
    weights: list
    biases: list
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ShapeError(f"bad layer_dims {self.layer_dims}")
        if self.activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expect}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i} has non-finite parameters")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def arrays(self) -> list:
        """Parameter arrays in canonical order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(vec[pos:pos + b.size].copy())
            pos += b.size
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, need {pos}")
        return self.replace(ws, bs)

    def replace(self, weights, biases) -> "MlpParams":
        return MlpParams(self.layer_dims, weights, biases, self.activation, self.output_activation)

    def copy(self) -> "MlpParams":
        return self.replace([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other: "MlpParams") -> bool:
        """Bit-exact equality of architecture and values."""
        return (
            self.layer_dims == other.layer_dims
            and self.activation == other.activation
            and self.output_activation == other.output_activation
            and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))
        )


@dataclass
class GradientBundle:
    weights: list
    biases: list = field(default_factory=list)

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, c: float) -> "GradientBundle":
        return GradientBundle([c * w for w in self.weights], [c * b for b in self.biases])

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "GradientBundle":
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])


def init_mlp(
    layer_dims: Sequence[int],
    rng,
    activation: str = "relu",
    output_activation: str = "identity",
) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    gen = as_generator(rng)
    ws, bs = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(gen.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(tuple(layer_dims), ws, bs, activation, output_activation)


def _as_batch(params: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise ShapeError(f"input of shape {x.shape} does not match input dim {params.in_dim}")
    return X, single


def forward_cache(params: MlpParams, X: np.ndarray):
    """Batched forward pass keeping what backprop needs: (output, cache)."""
    cache = []
    a = X
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        name = params.output_activation if i == last else params.activation
        out = _act(name, z)
        cache.append((a, z, out, name))
        a = out
    return a, cache


def forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on one vector ``(d,)`` or a batch ``(n, d)``."""
    X, single = _as_batch(params, x)
    out, _ = forward_cache(params, X)
    return out[0] if single else out


def backprop(params: MlpParams, cache, grad_out: np.ndarray, need_input_grad: bool = False, grad_at_logit: bool = False):
    """Reverse pass given dLoss/dOutput. Returns (GradientBundle, dLoss/dInput or None).

    With ``grad_at_logit`` the gradient is taken w.r.t. the output layer's
    pre-activation (e.g. log-loss through a sigmoid, where it is p - y).
    """
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    g = grad_out
    for i in range(params.n_layers - 1, -1, -1):
        a_in, z, a_out, name = cache[i]
        d = None if (grad_at_logit and i == params.n_layers - 1) else _act_grad(name, z, a_out)
        if d is not None:
            g = g * d
        gw[i] = a_in.T @ g
        gb[i] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ params.weights[i].T
    return GradientBundle(gw, gb), (g if need_input_grad else None)


def backward(params: MlpParams, x, target):
    """Summed squared-error loss and its exact gradient.

    ``x`` may be a single vector or a batch; ``target`` must match the output
    shape (a scalar output may be given as a flat ``(n,)`` array).
    """
    X, single = _as_batch(params, x)
    out, cache = forward_cache(params, X)
    t = np.asarray(target, dtype=np.float64).reshape(out.shape)
    resid = out - t
    loss = float(np.sum(resid * resid))
    grads, _ = backprop(params, cache, 2.0 * resid)
    return loss, grads


def compose_identity(dims: Sequence[int]) -> MlpParams:
    """Identity-activation net whose layers are identity blocks (for testing)."""
    ws = [np.eye(a, b) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(b) for b in dims[1:]]
    return MlpParams(tuple(dims), ws, bs, "identity", "identity")


def linear_map(weight: np.ndarray, bias=None) -> MlpParams:
    """Single affine layer ``x @ weight + bias`` as an MlpParams."""
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
    return MlpParams(weight.shape, [weight.copy()], [bias.copy()], "identity", "identity")
