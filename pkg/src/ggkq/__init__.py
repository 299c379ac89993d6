"""Simulation and verification toolkit for rank-based scheduling in
G/G/k queues with server setup times."""

from . import bounds, config, dists, jobs, palm, sim

__all__ = ["bounds", "config", "dists", "jobs", "palm", "sim"]
__version__ = "0.1.0"
