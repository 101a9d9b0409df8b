// `!(x > 0.0)` guards are deliberate throughout: unlike `x <= 0.0` they
// also reject NaN, which is exactly what the validation sites want. Index
// loops in the assembly and tensor kernels keep the subscript notation of
// the formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

//! Solver kit for quasi-static elastoplasticity with random or parametric
//! material inputs. A LATIN-style iteration builds a separated expansion
//! u(x, t, theta) = sum_k lambda_k(theta) g_k(t) d_k(x) by alternating a
//! deterministic spatial stage with a per-sample temporal stage; a reduced
//! Newton pass re-solves the time-stochastic coefficients on the frozen
//! spatial basis, and a full-order Monte Carlo driver provides references.

pub mod error;
pub mod field;
pub mod io;
pub mod latin;
pub mod mcs;
pub mod mesh;
pub mod plasticity;
pub mod post;
pub mod problem;
pub mod sparse;
pub mod tensor;
pub mod timegrid;
pub mod update;

pub use error::{Error, Result};
pub use field::{
    draw_samples, kl_expand, truncation_error, AffineField, AffineTerm, CovarianceSpec,
    KlExpansion, SampleSet, VariableKind,
};
pub use io::{load_ensemble, load_reduced, load_state, save_ensemble, save_reduced, save_state};
pub use latin::{
    component_weights, expectation, global_stage, local_stage, orthonormalize, project_samples,
    resume, solution_error, solve, split_rank1, stress_sweep, triplet_error, LatinState,
    LocalStageResult, SolverOptions, StopReason, StressHistory, Triplet, TripletStats,
};
pub use mcs::{
    newton_solve_sample, quadratic_phase_fraction, run_mcs, work_energy_gap, EnsembleResult,
    McsOptions, SampleRun,
};
pub use mesh::{
    apply_dirichlet, assemble_component_stiffness, assemble_internal_force,
    assemble_traction_force, build_box_mesh, parse_mesh, reduce_with_values,
    strain_from_displacement, Assembler, Face, Kinematics, Mesh, ReducedSystem, TriFace,
};
pub use plasticity::{
    consistent_tangent, return_map_stress, state_from_trial, stress_from_trial,
    tangent_apply, tangent_from_trial, tangent_quadratic, trial_state, update_internal,
    yield_value, MaterialPoint, PlasticState, TrialState,
};
pub use post::{
    l2_error, pdf_estimate, pdf_estimate_with_support, stress_recovery, write_convergence_log,
    write_error_table, write_pdf_curves, PdfEstimate,
};
pub use problem::Problem;
pub use sparse::{solve_spd, Pattern, SparseSym};
pub use tensor::{deviatoric_voigt, ElasticTensor, Matrix6, SymTensor};
pub use timegrid::{TimeGrid, DEFAULT_PROFILE};
pub use update::{reduced_newton_step, update_stage, ReducedSolution, UpdateOptions};
