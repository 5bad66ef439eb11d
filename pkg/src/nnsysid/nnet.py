"""Feedforward multilayer perceptrons built on the tape engine.

Networks are plain affine chains with an elementwise nonlinearity after
every layer except the last (physical outputs stay unbounded).  Weights
start uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths (input, hidden..., output) and the hidden activation."""

    widths: tuple
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ValueError(f"MLPSpec needs at least two widths, got {widths}")
        if any(w <= 0 for w in widths):
            raise ValueError(f"MLPSpec widths must be positive, got {widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; choose from {sorted(_ACTIVATIONS)}"
            )

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]


class MLP:
    """Per-layer weight/bias Variables chained per an MLPSpec."""

    def __init__(self, spec, weights, biases):
        self.spec = spec
        self.weights = list(weights)
        self.biases = list(biases)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            n_in, n_out = spec.widths[i], spec.widths[i + 1]
            if w.value.shape != (n_in, n_out) or b.value.shape != (n_out,):
                raise ValueError(
                    f"layer {i}: weight {w.value.shape} / bias {b.value.shape} "
                    f"do not chain as {n_in}->{n_out}"
                )

    def parameters(self):
        """All weight and bias Variables, layer by layer."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    @property
    def n_parameters(self):
        return sum(p.value.size for p in self.parameters())


def mlp_init(spec, seed):
    """Build an MLP with seeded uniform fan-in initialization."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        weights.append(ad.Variable(w, name=f"w{i}"))
        biases.append(ad.Variable(np.zeros(n_out), name=f"b{i}"))
    return MLP(spec, weights, biases)


def mlp_forward(net, x):
    """Evaluate the network on a Variable with last axis = input width.

    Leading axes are treated as batch dimensions.
    """
    width = x.value.shape[-1] if x.value.ndim else None
    if width != net.spec.n_in:
        raise ValueError(
            f"mlp_forward: input last axis {x.value.shape} does not match "
            f"network input width {net.spec.n_in}"
        )
    act = _ACTIVATIONS[net.spec.activation]
    out = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = ad.add(ad.matmul(out, w), b)
        if i != last:
            out = act(out)
    return out
