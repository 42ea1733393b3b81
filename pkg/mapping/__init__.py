"""NeRF mapping: keyframe database, losses and the joint optimizer."""
