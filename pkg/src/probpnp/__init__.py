"""Probabilistic Perspective-n-Points: robust PnP, pose posteriors and Monte Carlo KL losses."""

__version__ = "0.1.0"
