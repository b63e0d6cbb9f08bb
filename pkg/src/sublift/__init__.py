"""Sublabel-accurate convex relaxation of vectorial multilabel problems.

The label space is partitioned into simplices, the dataterm is convexified
per simplex, and the lifted problem is solved with a primal-dual method.
"""

from .label_space import Triangulation, build_uniform_triangulation, project_simplex
from .dataterm import (
    BaselineLinear,
    Quadratic,
    SampledConvexified,
    TruncatedQuadratic,
    convexify_sampled,
    rho_i_star,
)
from .problems import (
    Problem,
    adaptive_denoising_problem,
    baseline_problem,
    flow_problem,
    robust_rof_problem,
    rof_problem,
)
from .solver import SolverConfig, SolverResult, energy_report, solve

__version__ = "0.1.0"

__all__ = [
    "Triangulation",
    "build_uniform_triangulation",
    "project_simplex",
    "Quadratic",
    "TruncatedQuadratic",
    "SampledConvexified",
    "BaselineLinear",
    "convexify_sampled",
    "rho_i_star",
    "Problem",
    "rof_problem",
    "robust_rof_problem",
    "flow_problem",
    "adaptive_denoising_problem",
    "baseline_problem",
    "SolverConfig",
    "SolverResult",
    "solve",
    "energy_report",
]
