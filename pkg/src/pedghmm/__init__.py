"""Pedestrian position and goal prediction with growing hidden Markov
models seeded from potential cost maps."""

__version__ = "0.1.0"
