"""Crystalline curvature flow of closed curves written as graphs over the angle.

Modules: anisotropy (the energy J and its mollification), jr_profile
(admissible profiles), composition (Omega = dJ o dw), facet_tracker (exact
event-driven solution for piecewise data), regularized_solver (finite
differences for the mollified flow), semidiscrete (implicit Euler steps)
and harness_cli (scenarios and the command line).
"""

from .anisotropy import AnisotropyJ, RegularizedJ, square_J
from .jr_profile import Profile, validate_jr

__all__ = ["AnisotropyJ", "Profile", "RegularizedJ", "square_J", "validate_jr"]
__version__ = "0.1.0"
