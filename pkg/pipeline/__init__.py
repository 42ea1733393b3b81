"""Stage runner, dataset ingestion, run evaluation and ablation sweeps."""
