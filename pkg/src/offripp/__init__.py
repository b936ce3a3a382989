"""Offline batch-constrained RL for informative path planning on a GP-augmented roadmap."""

__version__ = "0.1.0"
