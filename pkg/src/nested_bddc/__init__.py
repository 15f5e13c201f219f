"""Nested BDDC solver for 2D mixed-form Darcy problems on RT0 quad meshes."""

from .mesh_fem import (
    CoefficientField,
    QuadMesh,
    Rt0System,
    assemble_rhs,
    assemble_rt0,
    build_mesh,
    check_compatibility,
    divergence_defect,
)
from .hierarchy import (
    AveragingWeights,
    HierarchyConfig,
    LevelDecomposition,
    build_hierarchy,
    classify_dofs,
    compute_weights,
    face_average_functional,
    hierarchy_summary,
)
from .saddle_core import (
    Factorization,
    KktSystem,
    factor_indefinite,
    pressure_gauge,
    solve_constrained,
)
from .bddc import (
    MultilevelPreconditioner,
    apply_multilevel,
    apply_two_level,
    assemble_coarse_problem,
    build_coarse_basis,
    delta_correction,
    interior_correction,
)
from .krylov import PcgReport, lanczos_condition, pcg
from .nested_driver import (
    ExperimentSpec,
    NestedSolver,
    ResultRow,
    nested_solve,
    oracle_direct_solve,
    preset_specs,
    run_table,
)

__version__ = "0.1.0"
