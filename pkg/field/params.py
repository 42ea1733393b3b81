# =============================================================================
# FIELD PARAMETERS - field/params.py
# =============================================================================
# Flat, named parameter set of the radiance field with matching gradient
# buffers and optimizer moments. Names are "<module>.<layer>.<w|b>" plus
# "hash.table" and, when enabled, "appearance.table".
# =============================================================================

from __future__ import annotations

import copy

import numpy as np

from field.mlp import init_linear

APPEARANCE_SLOTS = 256
APPEARANCE_DIM = 8


class FieldParams:
    def __init__(self, arrays, groups):
        self.arrays = dict(arrays)
        self.groups = dict(groups)
        self.grads = {k: np.zeros_like(v) for k, v in self.arrays.items()}
        self.moments = {}
        self.step = 0

    @classmethod
    def initialize(cls, cfg, grid, rng, zero_density_output=False):
        """
        Fresh parameters for a FieldConfig.

        Args:
            cfg: FieldConfig.
            grid: HashGrid describing the table layout.
            rng: numpy Generator.
            zero_density_output: Zero the density decoder's output layer
                (the field then has constant density softplus(0)).
        """
        dtype = np.dtype(cfg.dtype)
        arrays, groups = {}, {}

        arrays["hash.table"] = grid.init_table(rng, dtype)
        groups["hash.table"] = "hash"

        def add(name, nin, nout, zero=False):
            w, b = init_linear(rng, nin, nout, dtype, zero=zero)
            arrays[f"{name}.w"], arrays[f"{name}.b"] = w, b
            groups[f"{name}.w"] = groups[f"{name}.b"] = "decoder"

        add("density.0", grid.output_dim, cfg.density_hidden)
        add("density.1", cfg.density_hidden, 1 + cfg.geo_features, zero=zero_density_output)
        color_in = cfg.geo_features + cfg.sh_degree**2
        if cfg.appearance_embedding:
            arrays["appearance.table"] = np.zeros((APPEARANCE_SLOTS, APPEARANCE_DIM), dtype=dtype)
            groups["appearance.table"] = "decoder"
            color_in += APPEARANCE_DIM
        add("color.0", color_in, cfg.color_hidden)
        add("color.1", cfg.color_hidden, cfg.color_hidden)
        add("color.2", cfg.color_hidden, 3)
        return cls(arrays, groups)

    def names(self):
        return list(self.arrays)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def new_grad_buffers(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def grads_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.grads.values())

    def num_parameters(self):
        return int(sum(v.size for v in self.arrays.values()))

    def snapshot(self):
        """Read-only copy of the parameter values (no gradients or moments)."""
        arrays = {k: v.copy() for k, v in self.arrays.items()}
        for v in arrays.values():
            v.setflags(write=False)
        out = FieldParams.__new__(FieldParams)
        out.arrays = arrays
        out.groups = dict(self.groups)
        out.grads = {}
        out.moments = {}
        out.step = self.step
        return out

    def clone(self):
        return copy.deepcopy(self)
