"""Scene files, metrics, experiment runners and file emitters."""
