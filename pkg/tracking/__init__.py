"""Sliding-window patch tracking with bundle adjustment."""
