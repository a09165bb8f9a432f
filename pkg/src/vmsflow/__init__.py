"""Two-level variational multiscale (VMS) finite element solver for
incompressible Navier-Stokes flow on unstructured simplex meshes.

The coarse scale is a continuous piecewise-linear velocity/pressure pair and
the fine scale is a per-element bubble velocity that is condensed out of the
global system at the element level.  The public API is layered:

- ``mesh`` / ``basis``: simplex meshes, quadrature, shape functions, bubbles
- ``kernels`` / ``condense``: element residuals, tangents, Schur condensation
- ``assembly`` / ``linalg``: boundary conditions, global systems, GMRES+ILU0
- ``solver``: Newton iteration, backward-Euler stepping, Reynolds continuation
- ``cases`` / ``output``: flow cases, error norms, VTK/CSV writers, perf report
- ``runs``: one-call drivers that bundle a solve with its artifacts

The command-line interface lives in ``vmsflow.cli`` and the HTTP service
factory in ``vmsflow.service``; both are thin clients of ``vmsflow.runs``.
"""

__version__ = "0.1.0"

from .mesh import (
    Mesh,
    MeshError,
    MeshViolation,
    element_volumes,
    generate_box_mesh,
    load_mesh,
    validate,
    write_native,
)
from .basis import (
    BasisTables,
    QuadratureError,
    QuadratureRule,
    bubble,
    eval_basis,
    quadrature,
    shape_functions,
    shape_gradients,
    tabulate,
)
from .kernels import (
    CaseData,
    ElementBlocks,
    ElementState,
    ElementSystem,
    FineScaleError,
    FlowState,
    default_tables,
    element_residual,
    element_tangent,
    evaluate_elements,
    fine_block_invert,
)
from .condense import (
    CondensedBatch,
    CondensedElement,
    condense_blocks,
    condense_element,
    recover_fine,
)
from .assembly import (
    AssemblyError,
    AssemblyTimings,
    BoundaryConditions,
    DofMap,
    GlobalSystem,
    apply_dirichlet,
    assemble,
    build_dofmap,
    build_global_system,
    dof_counts,
    evaluate_chunked,
    free_residual_norm,
    resolve_bcs,
)
from .linalg import (
    GmresResult,
    KrylovConfig,
    LinearSolveError,
    dense_solve,
    gmres_solve,
    ilu0,
    make_preconditioner,
)
from .solver import (
    ContinuationResult,
    ConvergenceTrace,
    NewtonConfig,
    NewtonError,
    TimeStepError,
    continue_reynolds,
    newton_solve,
    timestep_drive,
)
from .cases import (
    CaseDefinition,
    CaseError,
    ManufacturedSolution,
    builtin_case,
    builtin_catalog,
    l2_errors,
    load_case_file,
    observed_orders,
)
from .output import (
    CenterlineTable,
    EfficiencyRow,
    OutputError,
    PerfRecord,
    amdahl_speedup,
    efficiency_report,
    extract_centerline,
    format_efficiency,
    surface_flux,
    write_centerline_csv,
    write_perf_csv,
    write_vtk,
)
from .runs import (
    RunOptions,
    RunResult,
    run_continuation,
    run_mesh,
    run_perf,
    run_solve,
    run_transient,
    run_verify,
    write_manifest,
)

__all__ = [
    "__version__",
    # mesh
    "Mesh",
    "MeshError",
    "MeshViolation",
    "element_volumes",
    "generate_box_mesh",
    "load_mesh",
    "validate",
    "write_native",
    # basis
    "BasisTables",
    "QuadratureError",
    "QuadratureRule",
    "bubble",
    "eval_basis",
    "quadrature",
    "shape_functions",
    "shape_gradients",
    "tabulate",
    # kernels
    "CaseData",
    "ElementBlocks",
    "ElementState",
    "ElementSystem",
    "FineScaleError",
    "FlowState",
    "default_tables",
    "element_residual",
    "element_tangent",
    "evaluate_elements",
    "fine_block_invert",
    # condense
    "CondensedBatch",
    "CondensedElement",
    "condense_blocks",
    "condense_element",
    "recover_fine",
    # assembly
    "AssemblyError",
    "AssemblyTimings",
    "BoundaryConditions",
    "DofMap",
    "GlobalSystem",
    "apply_dirichlet",
    "assemble",
    "build_dofmap",
    "build_global_system",
    "dof_counts",
    "evaluate_chunked",
    "free_residual_norm",
    "resolve_bcs",
    # linalg
    "GmresResult",
    "KrylovConfig",
    "LinearSolveError",
    "dense_solve",
    "gmres_solve",
    "ilu0",
    "make_preconditioner",
    # solver
    "ContinuationResult",
    "ConvergenceTrace",
    "NewtonConfig",
    "NewtonError",
    "TimeStepError",
    "continue_reynolds",
    "newton_solve",
    "timestep_drive",
    # cases
    "CaseDefinition",
    "CaseError",
    "ManufacturedSolution",
    "builtin_case",
    "builtin_catalog",
    "l2_errors",
    "load_case_file",
    "observed_orders",
    # output
    "CenterlineTable",
    "EfficiencyRow",
    "OutputError",
    "PerfRecord",
    "amdahl_speedup",
    "efficiency_report",
    "extract_centerline",
    "format_efficiency",
    "surface_flux",
    "write_centerline_csv",
    "write_perf_csv",
    "write_vtk",
    # runs
    "RunOptions",
    "RunResult",
    "run_continuation",
    "run_mesh",
    "run_perf",
    "run_solve",
    "run_transient",
    "run_verify",
    "write_manifest",
]
