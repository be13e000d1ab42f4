"""Fully connected tanh network with a flat parameter vector and manual backprop."""

from __future__ import annotations

import numpy as np

from ._rng import make_rng
from .errors import ConfigError


class Mlp:
    """Dense network ``widths[0] -> ... -> widths[-1]``; tanh hidden, linear output.

    Parameters live in one flat float64 vector so optimizers, finite-difference
    checks and serialization all see the same array. Layer ``i`` owns a
    ``(widths[i], widths[i+1])`` weight block followed by its bias.
    """

    def __init__(self, widths, params=None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError(f"invalid layer widths {widths}")
        self.widths = widths
        n = self.count_params(widths)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ConfigError(f"expected {n} parameters for widths {widths}, got {params.shape}")
        self.params = params.copy()

    @staticmethod
    def count_params(widths) -> int:
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))

    @classmethod
    def initialize(cls, widths, rng=0) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        gen = make_rng(rng)
        chunks = []
        for a, b in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(a)
            chunks.append(gen.uniform(-bound, bound, size=a * b + b))
        return cls(widths, np.concatenate(chunks))

    def copy(self) -> "Mlp":
        return Mlp(self.widths, self.params)

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    @property
    def n_outputs(self) -> int:
        return self.widths[-1]

    def _layers(self, params):
        out, i = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            w = params[i:i + a * b].reshape(a, b)
            i += a * b
            out.append((w, params[i:i + b]))
            i += b
        return out

    def forward(self, inputs):
        """Returns ``(outputs, cache)`` for a batch of shape ``(n, widths[0])``."""
        h = np.asarray(inputs, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.n_inputs:
            raise ConfigError(f"expected inputs of shape (n, {self.n_inputs}), got {h.shape}")
        layers = self._layers(self.params)
        acts = [h]
        for j, (w, b) in enumerate(layers):
            h = h @ w + b
            if j < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, inputs):
        return self.forward(inputs)[0]

    def backward(self, cache, grad_out):
        """Gradients of ``sum(grad_out * outputs)`` w.r.t. parameters and inputs."""
        acts = cache
        layers = self._layers(self.params)
        grads = []
        delta = np.asarray(grad_out, dtype=np.float64)
        for j in range(len(layers) - 1, -1, -1):
            w, _ = layers[j]
            grads.append((acts[j].T @ delta, delta.sum(axis=0)))
            delta = delta @ w.T
            if j > 0:
                delta = delta * (1.0 - acts[j] ** 2)
        flat = []
        for gw, gb in reversed(grads):
            flat.append(gw.ravel())
            flat.append(gb)
        return np.concatenate(flat), delta
