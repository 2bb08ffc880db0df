"""Reinforcement learning for mixed-integer model predictive control policies.

The package implements a parametric mixed-integer optimal control policy
(continuous inputs plus on/off switches), exact and relaxation-based
solvers for it, smooth exploration and score machinery for policy-gradient
learning, and a trainer that reproduces the bundled scalar benchmark.
"""

from .ocp import MpcParams, OcpSpec, build_scalar_example, riccati_terminal_weight

__all__ = [
    "MpcParams",
    "OcpSpec",
    "build_scalar_example",
    "riccati_terminal_weight",
]

__version__ = "0.1.0"
