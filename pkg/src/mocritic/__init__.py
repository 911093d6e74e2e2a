"""Learned motion-quality critics, heuristic motion metrics and critic-guided diffusion fine-tuning."""

__version__ = "0.1.0"
