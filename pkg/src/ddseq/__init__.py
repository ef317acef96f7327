"""ddseq: substructured Poisson sequences with two-level and adaptive
BDDC preconditioning and Krylov subspace recycling between solves."""

from . import kernels
from .errors import (
    ConfigError,
    ContractError,
    ConvergenceError,
    DdseqError,
    InsufficientCoarseDofsError,
    NotSpdError,
    PencilNotDefiniteError,
)
from .adaptive import AdaptiveConfig, adaptive_setup, pair_eigenproblem
from .bddc import bddc_apply, bddc_setup, build_weights, select_coarse_dofs
from .flowseq import FlowState, SequenceConfig, divergence_load, flow_step, synthetic_rhs
from .harness import ExperimentConfig, PoissonStack, parse_config, run_experiment, sweep
from .krylov import DeflationState, SolveReport, StoppingRule, deflated_pcg, pcg, update_basis
from .linalg import SparseMatrix, factorize_spd, generalized_sym_eig
from .meshfem import BoundaryCondition, Mesh, Partition, build_grid
from .substructure import build_subdomains, condense_rhs, recover_interior, schur_apply

__version__ = "0.1.0"

backend_name = kernels.backend_name
