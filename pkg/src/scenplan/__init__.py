"""Scenario-based chance-constrained trajectory planning toolkit.

Converts per-stage collision chance constraints into sampled half-space
constraints, prunes them to a minimal free-space polytope with a provable
support bound, and solves the resulting deterministic optimal-control
problem inside a contouring MPC loop.  Includes a crossing-pedestrian
simulation harness and a Monte-Carlo risk oracle.
"""

from scenplan.risk import RiskProfile, eps_allocation, confidence_of, solve_sample_size

__all__ = [
    "RiskProfile",
    "eps_allocation",
    "confidence_of",
    "solve_sample_size",
]

__version__ = "0.1.0"
