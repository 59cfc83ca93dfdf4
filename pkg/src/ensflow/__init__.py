"""Finite-element solver for ensembles of 2D incompressible flows.

All ensemble members share one coefficient matrix per time step, so a
step costs a single sparse factorization plus one triangular solve per
member. Taylor-Hood (P2/P1) elements, first- and second-order
semi-implicit schemes, energy-stable open boundary conditions with
backflow penalization, and certified timestep (CFL) margins.
"""

from .ensemble import (ALGORITHMS, EnsembleConfig, EnsembleState, RunResult,
                       StepReport, check_baseline_restriction, compute_sigma,
                       run, select_gamma, stability_g, step)
from .fespace import (FEFunction, TaylorHoodSpace, ThetaParams, build_space,
                      interpolate, norms)
from .mesh import (BoundaryPartition, Mesh, generate_channel,
                   generate_rectangle, generate_unit_square, import_mesh,
                   mesh_metrics)

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS", "BoundaryPartition", "EnsembleConfig", "EnsembleState",
    "FEFunction", "Mesh", "RunResult", "StepReport", "TaylorHoodSpace",
    "ThetaParams", "build_space", "check_baseline_restriction",
    "compute_sigma", "generate_channel", "generate_rectangle",
    "generate_unit_square", "import_mesh", "interpolate", "mesh_metrics",
    "norms", "run", "select_gamma", "stability_g", "step",
]
