"""Radiance field: hash encoding, decoders, rendering and checkpoints."""
