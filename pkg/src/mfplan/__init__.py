"""Deterministic mean field planning: solver, certificates and diagnostics.

Public surface re-exported here; see the README for the CLI entry points.
"""

from .grid import (
    DensityField,
    GridSpec,
    MomentumField,
    ScalarField,
    continuity_residual,
    interp_center_to_face,
    interp_face_to_center,
    project_continuity,
    read_field,
    weighted_norms,
    write_field,
)
from .model import (
    ModelSpec,
    F_star_value,
    F_value,
    coupling_f,
    gap_YF,
    gap_YH,
    growth_check,
    hamiltonian,
    hamiltonian_grad_p,
    lagrangian,
    perspective_L,
)
from .primal import (
    SolverConfig,
    Solution,
    apriori_check,
    initialize_flow,
    primal_energy,
    prox_action,
    recover_velocity,
    solve_planning,
)
from .dual import DiagnosticsReport, dual_energy, duality_report, hj_residual, recover_dual
from .metrics import (
    displacement_interpolation_1d,
    heat_connector,
    heat_path_estimates,
    kl_cost,
    kl_distance,
    kl_upper_bound,
    w2_1d,
)
from .lagrangian import (
    Trajectory,
    path_optimality_check,
    sample_particles,
    trace_characteristic,
    trace_ensemble,
    transport_plan_summary,
    verify_superposition,
)

__version__ = "0.1.0"
