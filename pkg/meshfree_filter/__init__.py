"""Meshfree implicit filter, particle-filter and EKF baselines, and the benchmark CLI."""

__all__ = ["main"]

from .cli import main
