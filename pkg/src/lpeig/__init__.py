"""Multilevel local and parallel correction for finite element eigenproblems."""

from .corrector import (
    CorrectionState,
    Hierarchy,
    RunConfig,
    augmented_eigensolve,
    interface_solve,
    local_bvp_solve,
    multilevel_correction,
    one_correction_step,
)
from .decomp import build_partition, restrict_space
from .fespace import (
    EigenPair,
    assemble_mass,
    assemble_stiffness,
    build_space,
    coefficient_field,
    compute_errors,
    prolongation_matrix,
    rayleigh_quotient,
)
from .harness import estimate_orders, run_experiment
from .mesh import build_structured_mesh, refine_regular
from .sparse import cg_solve, coarse_eigensolve, dense_gen_eigensolve

__version__ = "0.1.0"

__all__ = [
    "CorrectionState",
    "EigenPair",
    "Hierarchy",
    "RunConfig",
    "assemble_mass",
    "assemble_stiffness",
    "augmented_eigensolve",
    "build_partition",
    "build_space",
    "build_structured_mesh",
    "cg_solve",
    "coarse_eigensolve",
    "coefficient_field",
    "compute_errors",
    "dense_gen_eigensolve",
    "estimate_orders",
    "interface_solve",
    "local_bvp_solve",
    "multilevel_correction",
    "one_correction_step",
    "prolongation_matrix",
    "rayleigh_quotient",
    "refine_regular",
    "restrict_space",
    "run_experiment",
]
