"""Volt-VAR optimization of radial feeders with an IMPALA-style actor-learner trainer."""

__version__ = "0.1.0"
