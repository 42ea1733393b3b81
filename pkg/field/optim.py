# =============================================================================
# OPTIMIZER - field/optim.py
# =============================================================================
# Adaptive-moment updates with decoupled weight decay, one learning rate per
# parameter group ("hash", "decoder", "pose").
# =============================================================================

from __future__ import annotations

import numpy as np

from errors import InvalidArgumentError


class AdamW:
    """
    Args:
        lr: Mapping group -> learning rate.
        weight_decay: Mapping group -> decoupled decay (missing groups: 0).
        betas: First and second moment decay.
        eps: Denominator guard.
    """

    def __init__(self, lr, weight_decay=None, betas=(0.9, 0.99), eps=1e-15):
        if any(v < 0 for v in lr.values()):
            raise InvalidArgumentError("learning rates must be non-negative")
        self.lr = dict(lr)
        self.weight_decay = dict(weight_decay or {})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.moments = {}
        self.steps = {}

    @classmethod
    def from_config(cls, mapping):
        return cls(
            {"hash": mapping.lr_hash, "decoder": mapping.lr_decoder, "pose": mapping.lr_pose},
            {"hash": mapping.weight_decay_hash, "decoder": mapping.weight_decay_decoder},
            (mapping.beta1, mapping.beta2),
            mapping.eps,
        )

    def scale_lr(self, factor):
        for group in self.lr:
            self.lr[group] *= factor

    def update(self, name, value, grad, group):
        """Update `value` in place and return it."""
        if group not in self.lr:
            raise InvalidArgumentError(f"unknown parameter group {group!r}")
        m, v = self.moments.get(name, (None, None))
        if m is None:
            m = np.zeros_like(value, dtype=np.float64)
            v = np.zeros_like(value, dtype=np.float64)
        step = self.steps.get(name, 0) + 1
        g = np.asarray(grad, dtype=np.float64)
        m = self.beta1 * m + (1.0 - self.beta1) * g
        v = self.beta2 * v + (1.0 - self.beta2) * g * g
        self.moments[name] = (m, v)
        self.steps[name] = step
        m_hat = m / (1.0 - self.beta1**step)
        v_hat = v / (1.0 - self.beta2**step)
        lr = self.lr[group]
        delta = lr * m_hat / (np.sqrt(v_hat) + self.eps)
        decay = self.weight_decay.get(group, 0.0)
        if decay:
            delta = delta + lr * decay * np.asarray(value, dtype=np.float64)
        value -= delta.astype(value.dtype)
        return value

    def step_params(self, params):
        """One update of every FieldParams array from its gradient buffer."""
        for name, array in params.arrays.items():
            self.update(name, array, params.grads[name], params.groups[name])
        params.step += 1
        params.moments = self.moments
