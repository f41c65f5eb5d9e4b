"""Curiosity-driven trajectory prioritization for goal-conditioned DDPG + HER."""

__version__ = "0.1.0"
