# =============================================================================
# DECODER LAYERS - field/mlp.py
# =============================================================================
# Small fully connected layers with hand-written backward passes. Layers do
# not own their weights: they read and write named arrays of FieldParams so
# the optimizer and the checkpoint see a single flat parameter set.
# =============================================================================

import numpy as np


class ReLU:
    def forward(self, x):
        return x * (x > 0)

    def backward(self, x, dout):
        return (x > 0) * dout


class Linear:
    def __init__(self, params, name):
        self.params = params
        self.w_name = f"{name}.w"
        self.b_name = f"{name}.b"

    @property
    def w(self):
        return self.params.arrays[self.w_name]

    @property
    def b(self):
        return self.params.arrays[self.b_name]

    def forward(self, x):
        return x @ self.w + self.b

    def backward(self, x, dout, grads=None):
        """Accumulate weight gradients, return the input cotangent."""
        grads = self.params.grads if grads is None else grads
        grads[self.w_name] += (x.T @ dout).astype(grads[self.w_name].dtype)
        grads[self.b_name] += dout.sum(axis=0).astype(grads[self.b_name].dtype)
        return dout @ self.w.T


def init_linear(rng, nin, nout, dtype, zero=False):
    """He-uniform weights and zero bias."""
    if zero:
        return np.zeros((nin, nout), dtype=dtype), np.zeros(nout, dtype=dtype)
    limit = np.sqrt(6.0 / nin)
    w = rng.uniform(-limit, limit, size=(nin, nout)).astype(dtype)
    return w, np.zeros(nout, dtype=dtype)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
