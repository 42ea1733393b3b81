# =============================================================================
# CORRESPONDENCE PROVIDERS - tracking/providers.py
# =============================================================================
# A correspondence provider stands where a learned update operator would:
# given the patch graph and the window images it returns, per edge, a 2D
# correction delta (pixels) and a per-axis confidence psi >= 0.
#
# Usage:
#   delta, psi = provider(graph, images)
# =============================================================================

from typing import Protocol

import numpy as np

from errors import ProviderError


class CorrespondenceProvider(Protocol):
    def __call__(self, graph, images):
        """Return (delta, psi), both (E, 2), for the graph's current edges."""
        ...


class ZeroFlowProvider:
    """Confirms the current reprojections with a constant confidence."""

    def __init__(self, confidence=1.0):
        self.confidence = confidence

    def __call__(self, graph, images):
        n = graph.num_edges
        return np.zeros((n, 2)), np.full((n, 2), self.confidence)


def check_provider_output(graph, delta, psi):
    """Validate a provider's answer; raises ProviderError on contract violations."""
    try:
        delta = np.asarray(delta, dtype=np.float64).reshape(graph.num_edges, 2)
        psi = np.asarray(psi, dtype=np.float64).reshape(graph.num_edges, 2)
    except ValueError as exc:
        raise ProviderError(f"provider output has the wrong shape: {exc}") from exc
    if not np.all(np.isfinite(delta)):
        raise ProviderError("provider returned non-finite corrections")
    if not np.all(np.isfinite(psi)) or np.any(psi < 0):
        raise ProviderError("provider confidences must be finite and non-negative")
    return delta, psi
