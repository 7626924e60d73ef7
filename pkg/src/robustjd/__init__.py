"""Robust utility minimization under jump-diffusion model uncertainty.

Numerical companion to a robust stochastic control problem: candidate
measures are penalized through a time-consistent convex rate on their
Girsanov controls, the robust cost is estimated by importance sampling, the
dynamic value process is solved as a quadratic-exponential BSDE with jumps by
backward regression, and everything is cross-checked against closed forms
and an exact tree oracle.
"""

__version__ = "0.1.0"
