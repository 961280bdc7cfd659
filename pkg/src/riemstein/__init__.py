"""Numerical tools for Stein's method on Riemannian manifolds."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .manifolds import (  # noqa: F401
    ChartDiffusion,
    Circle,
    Euclidean,
    Hyperbolic3,
    ManifoldPoint,
    Sphere,
    TangentVector,
    cut_locus_indicator,
    distance,
    exp_map,
    log_map,
    make_manifold,
    metric_at,
    parallel_transport,
)
