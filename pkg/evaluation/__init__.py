"""Trajectory, mesh and image metrics."""
