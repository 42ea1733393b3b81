"""Analytic scenes, ground-truth rendering, oracle providers and dataset export."""
