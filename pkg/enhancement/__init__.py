"""Dense depth / normal priors aligned to the tracker's sparse depths."""
