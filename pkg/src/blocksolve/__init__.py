"""Two-stage block-Jacobi (multisplitting) solver framework.

Outer block Jacobi over a 3D block grid with synchronous or asynchronous
halo exchange, pluggable inner solvers per block, a simulated multi-worker
communication fabric with seeded delay injection, and a CLI harness for
parameter studies.
"""

from .comm import DelayModel, Fabric, HaloBufferPool, HaloMessage, ReductionTree, create_fabric
from .errors import ConfigurationError, ProtocolError, SolverBreakdownError
from .inner_solvers import (
    InnerSolveReport,
    InnerSolverSpec,
    cg_solve,
    gmres_solve,
    jacobi_solve,
)
from .linalg import (
    SingularMatrixError,
    SparseMatrix,
    SpectralEstimate,
    ZeroRhsError,
    dense_solve,
    power_iteration,
    residual_norms,
    spmv,
)
from .multisplit import (
    OuterConfig,
    ResidualTrace,
    SolveResult,
    combined_residual,
    iteration_operator,
    outer_solve,
    true_relative_residual,
)
from .problems import (
    BlockDecomposition,
    DirichletBoundary,
    Grid3D,
    LinearProblem,
    block_system,
    build_laplace_3d,
    decompose,
)

__version__ = "0.1.0"

__all__ = [
    "BlockDecomposition",
    "ConfigurationError",
    "DelayModel",
    "DirichletBoundary",
    "Fabric",
    "Grid3D",
    "HaloBufferPool",
    "HaloMessage",
    "InnerSolveReport",
    "InnerSolverSpec",
    "LinearProblem",
    "OuterConfig",
    "ProtocolError",
    "ReductionTree",
    "ResidualTrace",
    "SingularMatrixError",
    "SolveResult",
    "SolverBreakdownError",
    "SparseMatrix",
    "SpectralEstimate",
    "ZeroRhsError",
    "block_system",
    "build_laplace_3d",
    "cg_solve",
    "combined_residual",
    "create_fabric",
    "decompose",
    "dense_solve",
    "gmres_solve",
    "iteration_operator",
    "jacobi_solve",
    "outer_solve",
    "power_iteration",
    "residual_norms",
    "spmv",
    "true_relative_residual",
]
