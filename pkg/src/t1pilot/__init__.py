"""Trajectory learning for accelerated T1 mapping from inversion-recovery sequences."""

__version__ = "0.1.0"
