"""Random walks and Levy samplers in free nilpotent groups, as rough paths.

Subpackages:
  algebra        arithmetic in T^N(R^d), G^N, and the Lyndon-coordinate g^N
  paths          discrete paths, signature lifts, p-variation, oscillations
  interpolation  path functions and the jump-connecting construction
  levy           triplets, samplers, approximating arrays, exponent calculator
  flows          linear RDE flows and the Levy-Khintchine verifier
  cli            command-line front end
"""

from . import algebra, flows, interpolation, levy, paths
from .algebra import (
    AlgebraContext,
    GroupElement,
    LieElement,
    make_context,
)
from .paths import DiscretePath, p_variation, signature_lift, walk_from_array
from .interpolation import ConnectConfig, PathFunction, connect
from .levy import LevyTriplet, min_pvar_exponent, sample_levy
from .flows import LinearVectorFields, lk_verify, solve_linear

__version__ = "0.1.0"
